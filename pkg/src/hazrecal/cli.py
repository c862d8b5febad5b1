"""``hazrecal`` command line: fit, recalibrate, predict, simulate.

Exit codes: 0 success, 1 internal error, 2 input error, 3 infeasible
constraints. Option values come from CLI flags, then ``--config`` JSON,
then built-in defaults; the effective values are echoed into every output.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .absrisk import AbsoluteRiskInput, predict_batch
from .cox import fit_cox
from .el import ConstraintSpec
from .errors import HazrecalError, InfeasibleConstraint, InputError
from .io import (dumps, format_float, read_cohort_csv, read_competing, read_json, read_model,
                 read_recal, read_subjects_csv, read_summary)
from .recalib import recalibrate
from .simlab import (ESTIMATORS, ROUNDING, ScenarioConfig, contour_to_csv, metrics_to_csv,
                     run_competing_contour, run_scenario, default_workers)
from .survival import StepFunction

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3

DEFAULTS = {
    "fit": {"covariates": None, "tol": 1e-8, "max_iter": 50},
    "recalibrate": {"mode": "auto", "ci_level": 0.95, "diag_approx": False, "isotonic": False,
                    "constraints": None, "feasibility": "probe", "el_tol": 1e-10},
    "predict": {"method": None, "ci_level": 0.95, "t0": None, "t1": None, "competing": None},
    "simulate": {"scenario": "A1", "covariate_config": "C1", "replicates": 500, "seed": 42,
                 "n_source": 1000, "m_target": 100_000, "censor_zeta": -5.0,
                 "target_censor_zeta": None, "rounding": "nearest",
                 "estimators": list(ESTIMATORS), "eval_times": [20.0, 40.0, 60.0],
                 "ci_level": 0.95, "diag_approx": True, "workers": None,
                 "contour": False, "kappa_event": [0.25, 1.0, 4.0],
                 "kappa_competing": [0.25, 1.0, 4.0], "beta_c": [0.0, 0.0],
                 "contour_estimator": "weighted4"},
}

# keys that are file locations rather than options
PATH_KEYS = {"cohort", "model", "summary", "baseline", "subjects", "out", "csv", "config"}


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _level(text: str) -> float:
    x = float(text)
    if not 0 < x < 1:
        raise argparse.ArgumentTypeError("CI level must lie strictly between 0 and 1")
    return x


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(
        prog="hazrecal",
        description="Recalibrate Cox-model baseline hazards to a target population.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with option values (CLI flags win)")
        p.add_argument("--out", required=True, help="output file")

    p = sub.add_parser("fit", help="fit a Cox model to a cohort CSV",
                       argument_default=S)
    common(p)
    p.add_argument("--cohort", required=True, help="cohort CSV")
    p.add_argument("--covariates", type=_names, help="comma-separated covariate columns")
    p.add_argument("--tol", type=float, help="score tolerance (default 1e-8)")
    p.add_argument("--max-iter", dest="max_iter", type=int, help="Newton iterations (default 50)")

    p = sub.add_parser("recalibrate", help="recalibrate the baseline hazard to target summaries",
                       argument_default=S)
    common(p)
    p.add_argument("--cohort", required=True, help="source cohort CSV")
    p.add_argument("--model", required=True, help="model JSON written by `fit`")
    p.add_argument("--summary", required=True, help="target summary JSON")
    p.add_argument("--constraints", help="constraint spec JSON overriding the summary's")
    p.add_argument("--mode", choices=("auto", "unweighted", "weighted", "both"),
                   help="auto: unweighted, plus weighted when constraints are given")
    p.add_argument("--ci-level", dest="ci_level", type=_level, help="default 0.95")
    p.add_argument("--diag-approx", dest="diag_approx", action="store_true",
                   help="ignore covariances between target moment estimates")
    p.add_argument("--isotonic", action="store_true",
                   help="project estimates onto nondecreasing sequences")
    p.add_argument("--feasibility", choices=("probe", "strict"),
                   help="convex-hull check before the EL solve")
    p.add_argument("--el-tol", dest="el_tol", type=float, help="EL dual tolerance")
    p.add_argument("--csv", help="also write a tidy CSV of the estimates")

    p = sub.add_parser("predict", help="absolute risk for subject profiles",
                       argument_default=S)
    common(p)
    p.add_argument("--model", required=True, help="model JSON written by `fit`")
    p.add_argument("--baseline", required=True, help="result JSON written by `recalibrate`")
    p.add_argument("--subjects", required=True, help="subjects CSV")
    p.add_argument("--competing", help="competing cumulative hazard JSON (default: none)")
    p.add_argument("--method", choices=("unweighted", "weighted"),
                   help="which recalibrated baseline to use")
    p.add_argument("--t0", type=float, help="start of the projection window")
    p.add_argument("--t1", type=float, help="end of the projection window")
    p.add_argument("--ci-level", dest="ci_level", type=_level, help="default 0.95")

    p = sub.add_parser("simulate", help="Monte-Carlo study of the estimators",
                       argument_default=S)
    common(p)
    p.add_argument("--scenario", choices=("A1", "A2", "A3", "A4"))
    p.add_argument("--covariates", dest="covariate_config", choices=("C1", "C2", "C3", "C4"))
    p.add_argument("--replicates", "--reps", dest="replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-source", "--n", dest="n_source", type=int)
    p.add_argument("--m-target", "--m", dest="m_target", type=int)
    p.add_argument("--zeta", dest="censor_zeta", type=float, help="censoring shift for Z1=1")
    p.add_argument("--target-zeta", dest="target_censor_zeta", type=float,
                   help="censoring shift in the target (default: same as --zeta)")
    p.add_argument("--rounding", choices=sorted(ROUNDING))
    p.add_argument("--estimators", type=_names)
    p.add_argument("--eval-times", dest="eval_times", type=_floats)
    p.add_argument("--ci-level", dest="ci_level", type=_level)
    p.add_argument("--full-cov", dest="diag_approx", action="store_false",
                   help="use the full covariance of the target moments")
    p.add_argument("--workers", type=int,
                   help="worker processes (default: $HAZRECAL_WORKERS or 1)")
    p.add_argument("--contour", action="store_true",
                   help="competing-risk sensitivity grid instead of the metrics table")
    p.add_argument("--kappa-event", dest="kappa_event", type=_floats)
    p.add_argument("--kappa-competing", dest="kappa_competing", type=_floats)
    p.add_argument("--beta-c", dest="beta_c", type=_floats)
    p.add_argument("--contour-estimator", dest="contour_estimator", choices=ESTIMATORS[1:])
    return parser


def effective_config(command: str, args: argparse.Namespace) -> dict:
    given = vars(args)
    cfg = dict(DEFAULTS[command])
    if given.get("config"):
        file_cfg = read_json(given["config"])
        unknown = set(file_cfg) - set(cfg) - PATH_KEYS
        if unknown:
            raise InputError(f"{given['config']}: unknown option(s) {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in given.items() if k != "command"})
    return cfg


def _echo(cfg: dict) -> dict:
    return {"command": cfg["command"], **{k: v for k, v in sorted(cfg.items()) if k != "command"}}


def _write(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# --- commands -------------------------------------------------------------

def cmd_fit(cfg: dict, stdout) -> int:
    cohort, _ = read_cohort_csv(cfg["cohort"], cfg["covariates"])
    fit = fit_cox(cohort, tol=cfg["tol"], max_iter=cfg["max_iter"])
    _write(cfg["out"], dumps({"config": _echo(cfg), "model": fit.to_dict()}))
    stdout.write(fit_summary(fit, cohort.n, int(cohort.counted_events(1).sum())))
    return EXIT_OK


def fit_summary(fit, n: int, events: int) -> str:
    lines = [f"Cox model: n={n}, events={events}, iterations={fit.iterations}",
             f"{'covariate':<16}{'beta':>12}{'se':>12}{'HR':>10}"]
    for name, b, s in zip(fit.covariate_names, fit.beta_hat, fit.se):
        lines.append(f"{name:<16}{b:>12.6f}{s:>12.6f}{math.exp(b):>10.3f}")
    return "\n".join(lines) + "\n"


def _constraints_for(cfg: dict, summary):
    if cfg["constraints"] is None:
        return summary
    d = read_json(cfg["constraints"])
    try:
        spec = ConstraintSpec.from_dict(d.get("constraints", d))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{cfg['constraints']}: {exc}") from None
    return replace(summary, constraints=spec, mu_s_covariance=None)


def cmd_recalibrate(cfg: dict, stdout) -> int:
    fit = read_model(cfg["model"])
    cohort, _ = read_cohort_csv(cfg["cohort"], list(fit.covariate_names) or None)
    summary = _constraints_for(cfg, read_summary(cfg["summary"]))
    mode = cfg["mode"]
    if mode in ("weighted", "both") and summary.constraints is None:
        raise InfeasibleConstraint(
            "weighted recalibration requested but the summary has no constraints")
    modes = {"auto": ["unweighted"] + (["weighted"] if summary.constraints is not None else []),
             "both": ["unweighted", "weighted"]}.get(mode, [mode])
    el_options = {"tol": cfg["el_tol"], "feasibility": cfg["feasibility"]}
    results = {}
    notes = []
    for m in modes:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res = recalibrate(cohort, fit, summary, mode=m, ci_level=cfg["ci_level"],
                              diag_approx=cfg["diag_approx"], isotonic=cfg["isotonic"],
                              el_options=el_options if m == "weighted" else None)
        msgs = list(res.warnings) + [str(w.message) for w in caught]
        if m == "weighted" and cfg["diag_approx"]:
            msgs.append("diagonal approximation: covariances between target moments ignored")
        notes.extend(f"{m}: {x}" for x in dict.fromkeys(msgs))
        results[m] = {**res.to_dict(), "warnings": list(dict.fromkeys(msgs))}
    _write(cfg["out"], dumps({"config": _echo(cfg), "results": results}))
    if cfg.get("csv"):
        _write(cfg["csv"], recal_csv(results, cfg))
    for note in notes:
        stdout.write(f"warning: {note}\n")
    zq = norm.ppf(0.5 + cfg["ci_level"] / 2)
    stdout.write(f"recalibrated baseline (z={zq:.4f})\n")
    for m, r in results.items():
        for t, lam, se in zip(r["times"], r["lambda0"], r["se"]):
            stdout.write(f"{m:<11} t={t:<8g} Lambda0={lam:.6g} se={se:.3g}\n")
    return EXIT_OK


def recal_csv(results: dict, cfg: dict) -> str:
    buf = _io.StringIO()
    buf.write("# config: " + json.dumps(_echo(cfg), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "estimate", "se", "ci_lo", "ci_hi", "method"])
    for m, r in results.items():
        for row in zip(r["times"], r["lambda0"], r["se"], r["ci_lower"], r["ci_upper"]):
            w.writerow([*(format_float(v) for v in row), m])
    return buf.getvalue()


def cmd_predict(cfg: dict, stdout) -> int:
    fit = read_model(cfg["model"])
    recal = read_recal(cfg["baseline"], cfg["method"])
    names = list(fit.covariate_names)
    ids, Z, t0, t1 = read_subjects_csv(cfg["subjects"], names, cfg["t0"], cfg["t1"])
    if cfg["competing"] is not None:
        lc, var_c, beta_c = read_competing(cfg["competing"])
    else:
        lc, var_c, beta_c = StepFunction(np.array([0.0]), np.array([0.0]), 0.0), None, None
    if beta_c is not None and beta_c.size != len(names):
        raise InputError(f"{cfg['competing']}: beta_c has {beta_c.size} entries, "
                         f"model has {len(names)} covariates")
    cov = recal.cov_lambda
    cov_bl = recal.cov_beta_lambda
    if cov is not None and not np.all(np.isfinite(cov)):
        cov, cov_bl = None, None
    template = AbsoluteRiskInput(
        t0=0.0, t1=1.0, z=np.zeros(len(names)),
        lambda0=StepFunction(recal.times, recal.lambda0, 0.0), beta=fit.beta_hat,
        lambda_c=lc, sigma_beta=fit.sigma_beta, cov_lambda=cov, cov_beta_lambda=cov_bl,
        var_lambda_c=var_c, beta_c=beta_c)
    risk, se = predict_batch(Z, t0, t1, template, with_variance=True)
    zq = float(norm.ppf(0.5 + cfg["ci_level"] / 2))
    lo = np.clip(risk - zq * se, 0.0, 1.0)
    hi = np.clip(risk + zq * se, 0.0, 1.0)
    buf = _io.StringIO()
    buf.write("# config: " + json.dumps(_echo(cfg), sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "t0", "t1", "risk", "se", "ci_lo", "ci_hi"])
    for row in zip(ids, t0, t1, risk, se, lo, hi):
        w.writerow([row[0], *(format_float(v) for v in row[1:])])
    _write(cfg["out"], buf.getvalue())
    stdout.write(f"wrote {len(ids)} predictions to {cfg['out']}\n")
    return EXIT_OK


def cmd_simulate(cfg: dict, stdout) -> int:
    keys = ("replicates", "seed", "n_source", "m_target", "censor_zeta",
            "target_censor_zeta", "rounding", "ci_level", "diag_approx", "workers")
    try:
        config = ScenarioConfig.from_names(
            cfg["scenario"], cfg["covariate_config"], **{k: cfg[k] for k in keys},
            estimators=tuple(cfg["estimators"]))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if cfg["contour"]:
        rows = run_competing_contour(config, cfg["kappa_event"], cfg["kappa_competing"],
                                     cfg["beta_c"], cfg["eval_times"], cfg["contour_estimator"])
        text = contour_to_csv(rows, config)
    else:
        rows = run_scenario(config, cfg["eval_times"])
        text = metrics_to_csv(rows, config)
    _write(cfg["out"], text)
    workers = config.workers or default_workers()
    stdout.write(f"wrote {len(rows)} rows to {cfg['out']} ({config.replicates} replicates, "
                 f"{workers} worker(s))\n")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "recalibrate": cmd_recalibrate, "predict": cmd_predict,
            "simulate": cmd_simulate}


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    try:
        cfg = effective_config(args.command, args)
        cfg["command"] = args.command
        return COMMANDS[args.command](cfg, stdout)
    except InfeasibleConstraint as exc:
        stderr.write(f"error: infeasible constraints: {exc}\n")
        if exc.direction is not None:
            d = ", ".join(format_float(x) for x in exc.direction)
            stderr.write(f"separating direction: [{d}]\n")
        return EXIT_INFEASIBLE
    except (HazrecalError, ValueError) as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - last-resort report
        stderr.write(f"internal error: {type(exc).__name__}: {exc}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
