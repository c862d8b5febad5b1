"""Survival data containers and nonparametric estimators.

All estimators use the delayed-entry risk set ``Y_i(t) = I(L_i < t <= X_i)``
and count an event only when it happens after entry, so records with
``exit_age == entry_age`` contribute covariates but no follow-up.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import CohortError, EmptyRiskSetError


class Event(IntEnum):
    CENSORED = 0
    EVENT = 1
    COMPETING = 2


@dataclass(frozen=True)
class SubjectRecord:
    entry_age: float
    exit_age: float
    event: int
    covariates: tuple[float, ...]

    def __post_init__(self):
        if not (0 <= self.entry_age <= self.exit_age):
            raise CohortError(
                f"need 0 <= entry_age <= exit_age, got {self.entry_age}, {self.exit_age}")
        if int(self.event) not in (0, 1, 2):
            raise CohortError(f"event must be 0, 1 or 2, got {self.event}")
        if not np.all(np.isfinite(self.covariates)):
            raise CohortError("covariates must be finite")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Cohort:
    """Column-oriented cohort: one row per subject.

    Parameters
    ----------
    entry, exit : (n,) arrays
        Left-truncation time ``L`` (0 if none) and observed time ``X``.
    event : (n,) int array
        0 censored, 1 event of interest, 2 competing event.
    covariates : (n, p) array
    covariate_names : sequence of str, optional
        Defaults to ``z1..zp``.
    """

    entry: np.ndarray
    exit: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        entry = np.array(self.entry, dtype=float).reshape(-1)
        exit_ = np.array(self.exit, dtype=float).reshape(-1)
        event = np.array(self.event).reshape(-1)
        z = np.array(self.covariates, dtype=float)
        if z.ndim == 1:
            z = z.reshape(-1, 1)
        n = entry.shape[0]
        if n < 1:
            raise CohortError("cohort must contain at least one subject")
        if exit_.shape[0] != n or event.shape[0] != n or z.shape[0] != n:
            raise CohortError("entry, exit, event and covariates must have the same length")
        if np.any(~np.isfinite(entry)) or np.any(~np.isfinite(exit_)):
            raise CohortError("ages must be finite")
        if np.any(entry < 0) or np.any(exit_ < entry):
            bad = int(np.flatnonzero((entry < 0) | (exit_ < entry))[0])
            raise CohortError(f"subject {bad}: need 0 <= entry_age <= exit_age")
        if not np.all(np.isin(event, (0, 1, 2))):
            raise CohortError("event codes must be 0, 1 or 2")
        if not np.all(np.isfinite(z)):
            raise CohortError("covariates must be finite")
        names = tuple(self.covariate_names) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        if len(names) != z.shape[1]:
            raise CohortError(
                f"{len(names)} covariate names for {z.shape[1]} covariate columns")
        object.__setattr__(self, "entry", _frozen(entry))
        object.__setattr__(self, "exit", _frozen(exit_))
        object.__setattr__(self, "event", _frozen(event.astype(np.int8)))
        object.__setattr__(self, "covariates", _frozen(z))
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_records(cls, records: Iterable[SubjectRecord],
                     covariate_names: Sequence[str] = ()) -> "Cohort":
        records = list(records)
        if not records:
            raise CohortError("cohort must contain at least one subject")
        p = len(records[0].covariates)
        if any(len(r.covariates) != p for r in records):
            raise CohortError("all subjects must share the covariate dimension")
        return cls(
            entry=[r.entry_age for r in records],
            exit=[r.exit_age for r in records],
            event=[int(r.event) for r in records],
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            covariate_names=tuple(covariate_names),
        )

    @property
    def n(self) -> int:
        return self.exit.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def records(self) -> list[SubjectRecord]:
        return [SubjectRecord(float(a), float(b), int(e), tuple(map(float, z)))
                for a, b, e, z in zip(self.entry, self.exit, self.event, self.covariates)]

    def subset(self, index) -> "Cohort":
        index = np.asarray(index)
        return Cohort(self.entry[index], self.exit[index], self.event[index],
                      self.covariates[index], self.covariate_names)

    def with_covariates(self, covariates, names: Sequence[str] | None = None) -> "Cohort":
        """Same follow-up with new covariates; names are kept when the width matches."""
        covariates = np.asarray(covariates, dtype=float)
        if names is None and covariates.ndim == 2 and covariates.shape[1] == self.p:
            names = self.covariate_names
        return Cohort(self.entry, self.exit, self.event, covariates, tuple(names or ()))

    def counted_events(self, code: int = 1) -> np.ndarray:
        """Mask of events of type ``code`` that occur strictly after entry."""
        return (self.event == code) & (self.exit > self.entry)


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function ``f(t) = values[k]`` for ``knots[k] <= t < knots[k+1]``."""

    knots: np.ndarray
    values: np.ndarray
    pre_value: float = 0.0

    def __post_init__(self):
        knots = np.array(self.knots, dtype=float).reshape(-1)
        values = np.array(self.values, dtype=float).reshape(-1)
        if knots.shape != values.shape:
            raise ValueError("knots and values must have the same length")
        if knots.size and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", _frozen(knots))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "pre_value", float(self.pre_value))

    def index(self, t) -> np.ndarray:
        """Index of the last knot ``<= t`` (-1 before the first knot)."""
        return np.searchsorted(self.knots, np.asarray(t, dtype=float), side="right") - 1

    def __call__(self, t):
        idx = self.index(t)
        padded = np.concatenate(([self.pre_value], self.values))
        out = padded[idx + 1]
        return float(out) if np.ndim(out) == 0 else out

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(np.concatenate(([self.pre_value], self.values)))

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "values": self.values.tolist(),
                "pre_value": self.pre_value}

    @classmethod
    def from_dict(cls, d: dict) -> "StepFunction":
        return cls(d["knots"], d["values"], d.get("pre_value", 0.0))


def at_risk_counts(cohort: Cohort, times: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Sum of ``weights`` over subjects with ``entry < t <= exit`` for each t."""
    times = np.asarray(times, dtype=float)
    w = np.ones(cohort.n) if weights is None else np.asarray(weights, dtype=float)
    ox = np.argsort(cohort.exit, kind="stable")
    ol = np.argsort(cohort.entry, kind="stable")
    # tail sums: total weight with exit >= t minus total weight with entry >= t
    tail_x = np.concatenate((np.cumsum(w[ox][::-1])[::-1], [0.0]))
    tail_l = np.concatenate((np.cumsum(w[ol][::-1])[::-1], [0.0]))
    ix = np.searchsorted(cohort.exit[ox], times, side="left")
    il = np.searchsorted(cohort.entry[ol], times, side="left")
    return tail_x[ix] - tail_l[il]


def event_table(cohort: Cohort, code: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct event times with event counts and risk-set sizes.

    An event recorded at its entry time has nobody at risk when no other
    subject is; that raises. Otherwise such events are not counted, since the
    subject is not in its own risk set.
    """
    mask = cohort.counted_events(code)
    stray = (cohort.event == code) & ~mask
    if stray.any():
        st = cohort.exit[stray]
        empty = st[at_risk_counts(cohort, st) <= 0]
        if empty.size:
            raise EmptyRiskSetError(float(empty.min()))
    times, d = np.unique(cohort.exit[mask], return_counts=True)
    n_risk = at_risk_counts(cohort, times)
    empty = np.flatnonzero(n_risk <= 0)
    if empty.size:
        raise EmptyRiskSetError(float(times[empty[0]]))
    return times, d.astype(float), n_risk


def risk_set_size(cohort: Cohort, t: float, beta, r: int = 0):
    """``H_r(t; beta) = n^-1 sum_i Y_i(t) Z_i^{(x)r} exp(beta'Z_i)``.

    Returns a scalar for ``r=0``, a p-vector for ``r=1`` and a p x p matrix
    for ``r=2``.
    """
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != cohort.p:
        raise ValueError(f"beta has length {beta.shape[0]}, cohort has p={cohort.p}")
    if r not in (0, 1, 2):
        raise ValueError("r must be 0, 1 or 2")
    z = cohort.covariates
    w = ((cohort.entry < t) & (t <= cohort.exit)) * np.exp(z @ beta) / cohort.n
    if r == 0:
        return float(w.sum())
    if r == 1:
        return w @ z
    return (z * w[:, None]).T @ z


def kaplan_meier(cohort: Cohort, treat_competing_as: str = "censored"
                 ) -> tuple[StepFunction, StepFunction]:
    """Product-limit survival for the event of interest with Greenwood variance.

    Competing events are censored at their time. Returns ``(survival,
    variance)`` as step functions over the distinct event times.
    """
    if treat_competing_as != "censored":
        raise ValueError("only treat_competing_as='censored' is supported")
    times, d, n_risk = event_table(cohort, code=1)
    surv = np.cumprod(1.0 - d / n_risk)
    with np.errstate(divide="ignore"):
        terms = np.where(n_risk > d, d / (n_risk * np.maximum(n_risk - d, 1e-300)), np.inf)
    gw = np.cumsum(terms)
    with np.errstate(invalid="ignore"):
        var = np.where(surv > 0, surv**2 * gw, 0.0)
    return StepFunction(times, surv, 1.0), StepFunction(times, var, 0.0)


def greenwood_covariance(survival: StepFunction, variance: StepFunction, times) -> np.ndarray:
    """Greenwood cross-covariance ``S(t1) S(t2) sum_{u <= min} d/(n(n-d))``.

    The cumulative Greenwood sum is recovered as ``var / S^2`` from the
    step functions returned by :func:`kaplan_meier`.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    s = np.asarray(survival(times), dtype=float).reshape(-1)
    v = np.asarray(variance(times), dtype=float).reshape(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(s > 0, v / s**2, 0.0)
    # G(min(t_i, t_j)) picks the cumulative sum at whichever time is earlier
    g_min = np.where(times[:, None] <= times[None, :], g[:, None], g[None, :])
    return np.outer(s, s) * g_min


def nelson_aalen(cohort: Cohort, event_code: int = 1, with_variance: bool = False):
    """Cumulative hazard ``sum d_u / n_u`` for events of type ``event_code``.

    With ``with_variance=True`` also returns the Poisson-type variance
    ``sum d_u / n_u^2`` as a second step function.
    """
    times, d, n_risk = event_table(cohort, code=event_code)
    cum = StepFunction(times, np.cumsum(d / n_risk), 0.0)
    if not with_variance:
        return cum
    return cum, StepFunction(times, np.cumsum(d / n_risk**2), 0.0)
