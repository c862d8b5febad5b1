"""File formats: cohort and subject CSVs, model/summary/result JSON.

The grammar is documented in ``docs/formats.md``. Floats are written with
``repr`` so every value round-trips exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .cox import CoxFit
from .errors import CohortError, InputError
from .recalib import RecalResult, TargetSummary
from .survival import Cohort, StepFunction

RESERVED = ("id", "entry_age", "exit_age", "event")
SUBJECT_RESERVED = ("id", "t0", "t1")


def _rows(text: str, source: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InputError(f"{source}: file is empty; a header line is required") from None
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        dup = sorted({h for h in header if header.count(h) > 1})
        raise InputError(f"{source}: line 1: duplicated column(s) {', '.join(dup)}")
    rows = []
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{source}: line {reader.line_num}: expected {len(header)} fields, "
                             f"got {len(row)}")
        rows.append((reader.line_num, row))
    return header, rows


def _read_text(path) -> tuple[str, str]:
    p = Path(path)
    try:
        return p.read_text(encoding="utf-8-sig"), str(p)
    except FileNotFoundError:
        raise InputError(f"{p}: no such file") from None
    except UnicodeDecodeError as exc:
        raise InputError(f"{p}: not valid UTF-8 ({exc.reason})") from None


def _number(cell: str, line: int, column: str, source: str) -> float:
    try:
        x = float(cell.strip())
    except ValueError:
        raise InputError(f"{source}: line {line}: column {column!r}: "
                         f"cannot parse {cell!r} as a number") from None
    if not math.isfinite(x):
        raise InputError(f"{source}: line {line}: column {column!r}: value must be finite")
    return x


def _matrix(header, rows, columns, source) -> np.ndarray:
    pos = [header.index(c) for c in columns]
    out = np.empty((len(rows), len(columns)))
    for i, (line, row) in enumerate(rows):
        for k, (c, j) in enumerate(zip(columns, pos)):
            out[i, k] = _number(row[j], line, c, source)
    return out


def parse_cohort_csv(text: str, covariates: Sequence[str] | None = None,
                     source: str = "<cohort>") -> tuple[Cohort, list[str]]:
    """Parse cohort CSV text into a :class:`Cohort` and the subject ids.

    ``exit_age`` and ``event`` are required, ``entry_age`` defaults to 0 and
    ``id`` to the 1-based row number. Every other column is a covariate unless
    ``covariates`` selects a subset.
    """
    header, rows = _rows(text, source)
    for col in ("exit_age", "event"):
        if col not in header:
            raise InputError(f"{source}: line 1: missing required column {col!r}")
    if covariates is None:
        covariates = [h for h in header if h not in RESERVED]
    else:
        missing = [c for c in covariates if c not in header]
        if missing:
            raise InputError(f"{source}: line 1: missing covariate column(s) {', '.join(missing)}")
    if not covariates:
        raise InputError(f"{source}: line 1: no covariate columns")
    if not rows:
        raise InputError(f"{source}: no data rows")
    cols = ["exit_age", "event"] + (["entry_age"] if "entry_age" in header else [])
    base = _matrix(header, rows, cols, source)
    z = _matrix(header, rows, list(covariates), source)
    event = base[:, 1]
    bad = np.flatnonzero((event != np.round(event)) | (event < 0) | (event > 2))
    if bad.size:
        line = rows[bad[0]][0]
        raise InputError(f"{source}: line {line}: column 'event' must be 0, 1 or 2")
    entry = base[:, 2] if "entry_age" in header else np.zeros(len(rows))
    bad = np.flatnonzero(base[:, 0] < entry)
    if bad.size:
        raise InputError(f"{source}: line {rows[bad[0]][0]}: exit_age is before entry_age")
    if "id" in header:
        j = header.index("id")
        ids = [row[j].strip() for _, row in rows]
    else:
        ids = [str(i + 1) for i in range(len(rows))]
    try:
        cohort = Cohort(entry, base[:, 0], event.astype(int), z, tuple(covariates))
    except CohortError as exc:
        raise InputError(f"{source}: {exc}") from None
    return cohort, ids


def read_cohort_csv(path, covariates: Sequence[str] | None = None) -> tuple[Cohort, list[str]]:
    text, source = _read_text(path)
    return parse_cohort_csv(text, covariates, source)


def format_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NA"
    return repr(x)


def cohort_to_csv(cohort: Cohort, ids: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "entry_age", "exit_age", "event", *cohort.covariate_names])
    ids = ids if ids is not None else [str(i + 1) for i in range(cohort.n)]
    for i in range(cohort.n):
        w.writerow([ids[i], format_float(cohort.entry[i]), format_float(cohort.exit[i]),
                    int(cohort.event[i]), *(format_float(v) for v in cohort.covariates[i])])
    return buf.getvalue()


def parse_subjects_csv(text: str, covariates: Sequence[str], source: str = "<subjects>",
                       t0: float | None = None, t1: float | None = None):
    """Profiles for prediction: returns ``(ids, Z, t0, t1)``.

    The ``t0``/``t1`` arguments, when given, take precedence over columns
    of the same name.
    """
    header, rows = _rows(text, source)
    missing = [c for c in covariates if c not in header]
    if missing:
        raise InputError(f"{source}: line 1: covariate(s) {', '.join(missing)} required by the "
                         "model are missing")
    extra = [h for h in header if h not in SUBJECT_RESERVED and h not in covariates]
    if extra:
        raise InputError(f"{source}: line 1: column(s) {', '.join(extra)} are not covariates "
                         "of the model")
    if not rows:
        raise InputError(f"{source}: no data rows")
    Z = _matrix(header, rows, list(covariates), source)
    times = {}
    for name, given in (("t0", t0), ("t1", t1)):
        if given is not None:
            times[name] = np.full(len(rows), float(given))
        elif name in header:
            times[name] = _matrix(header, rows, [name], source)[:, 0]
        else:
            raise InputError(f"{source}: line 1: no {name!r} column and no --{name} option")
    bad = np.flatnonzero(times["t1"] <= times["t0"])
    if bad.size:
        raise InputError(f"{source}: line {rows[bad[0]][0]}: t1 must exceed t0")
    if "id" in header:
        j = header.index("id")
        ids = [row[j].strip() for _, row in rows]
    else:
        ids = [str(i + 1) for i in range(len(rows))]
    return ids, Z, times["t0"], times["t1"]


def read_subjects_csv(path, covariates: Sequence[str], t0=None, t1=None):
    text, source = _read_text(path)
    return parse_subjects_csv(text, covariates, source, t0, t1)


# --- JSON -----------------------------------------------------------------

def read_json(path) -> dict:
    text, source = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{source}: line {exc.lineno}: invalid JSON ({exc.msg})") from None


def dumps(obj) -> str:
    """JSON with sorted keys; NaN becomes null so the output stays strict JSON."""
    def clean(o):
        if isinstance(o, float):
            return None if math.isnan(o) or math.isinf(o) else o
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        if isinstance(o, np.ndarray):
            return clean(o.tolist())
        if isinstance(o, np.generic):
            return clean(o.item())
        return o
    return json.dumps(clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _wrap(source: str, fn, d):
    try:
        return fn(d)
    except (KeyError, TypeError, ValueError) as exc:
        what = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        raise InputError(f"{source}: {what}") from None


def read_model(path) -> CoxFit:
    d = read_json(path)
    return _wrap(str(path), CoxFit.from_dict, d.get("model", d))


def _nan_none(values):
    return [math.nan if v is None else v for v in values]


def read_summary(path) -> TargetSummary:
    d = read_json(path)
    return _wrap(str(path), TargetSummary.from_dict, d.get("summary", d))


def read_recal(path, method: str | None = None) -> RecalResult:
    """A recalibration result, either bare or inside a ``results`` mapping."""
    d = read_json(path)
    if "results" in d:
        res = d["results"]
        if method is None:
            method = "weighted" if "weighted" in res else "unweighted"
        if method not in res:
            raise InputError(f"{path}: no {method!r} result (have {', '.join(sorted(res))})")
        d = res[method]

    def build(x):
        x = dict(x)
        x["cov_lambda"] = [_nan_none(r) for r in x["cov_lambda"]]
        x["cov_beta_lambda"] = [_nan_none(r) for r in x["cov_beta_lambda"]]
        x["se"] = _nan_none(x["se"])
        return RecalResult.from_dict(x)
    return _wrap(str(path), build, d)


def read_competing(path) -> tuple[StepFunction, np.ndarray | None, np.ndarray | None]:
    """Competing cumulative hazard: ``knots``, ``values``, optional ``variance`` and ``beta_c``."""
    d = read_json(path)

    def build(x):
        sf = StepFunction(np.asarray(x["knots"], float), np.asarray(x["values"], float),
                          float(x.get("pre_value", 0.0)))
        var = None if x.get("variance") is None else np.asarray(x["variance"], float)
        bc = None if x.get("beta_c") is None else np.asarray(x["beta_c"], float)
        return sf, var, bc
    return _wrap(str(path), build, d)
