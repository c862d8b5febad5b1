"""Monte-Carlo laboratory for the recalibration estimators.

Source and target cohorts follow Cox models with Weibull baselines
``Lambda_0(t) = kappa (theta t)^nu``. Target summaries are Kaplan-Meier
disease-free probabilities plus covariate moments, and each replicate runs
the Breslow, unweighted and weighted estimators.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .cox import breslow_variance, fit_cox
from .el import Constraint, ConstraintSpec, evaluate_constraints
from .errors import HazrecalError, SimulationError
from .recalib import TargetSummary, _Engine
from .survival import Cohort, at_risk_counts, greenwood_covariance, kaplan_meier, nelson_aalen

LOG2 = math.log(2.0)

WEIBULL_SCENARIOS = {
    "A1": (0.01, 2.0),
    "A2": (0.01, 1.5),
    "A3": (0.008, 2.0),
    "A4": (0.008, 1.5),
}
TARGET_BASELINE = (0.01, 2.0)


@dataclass(frozen=True)
class CovariateDesign:
    """``Z1 ~ Bern(p1)`` and ``Z2 | Z1=k ~ N(mean_k, sd_k^2)``."""

    p1: float = 0.5
    mean1: float = 0.0
    sd1: float = 1.0
    mean0: float = 0.0
    sd0: float = 1.0

    def __post_init__(self):
        if not 0 <= self.p1 <= 1 or self.sd0 <= 0 or self.sd1 <= 0:
            raise ValueError("invalid covariate design")

    def moments(self) -> dict[str, float]:
        """Closed-form population moments used by the constraint sets."""
        p = self.p1
        m2_1 = self.sd1**2 + self.mean1**2
        m2_0 = self.sd0**2 + self.mean0**2
        return {
            "E[Z1]": p,
            "E[Z2]": p * self.mean1 + (1 - p) * self.mean0,
            "E[Z2^2]": p * m2_1 + (1 - p) * m2_0,
            "E[Z2 I(Z1=1)]": p * self.mean1,
            "E[Z2^2 I(Z1=1)]": p * m2_1,
            "E[Z2 I(Z1=0)]": (1 - p) * self.mean0,
            "E[Z2^2 I(Z1=0)]": (1 - p) * m2_0,
        }


COVARIATE_DESIGNS = {
    "C1": CovariateDesign(0.5, 0.0, 1.0, 0.0, 1.0),
    "C2": CovariateDesign(0.8, 0.0, 1.0, 0.0, 1.0),
    "C3": CovariateDesign(0.5, 0.5, 1.2, -0.5, 0.8),
    "C4": CovariateDesign(0.8, 0.5, 1.2, -0.5, 0.8),
}

CONSTRAINT_SETS: dict[str, tuple[Constraint, ...]] = {
    "weighted1": (Constraint("raw_moment", 1),),
    "weighted2": (Constraint("raw_moment", 1), Constraint("raw_moment", 2)),
    "weighted3": (Constraint("raw_moment", 1), Constraint("raw_moment", 2),
                  Constraint("second_moment", 2)),
    "weighted4": (Constraint("raw_moment", 1),
                  Constraint("conditional_moment", 2, 1, 1.0),
                  Constraint("conditional_second_moment", 2, 1, 1.0),
                  Constraint("conditional_moment", 2, 1, 0.0),
                  Constraint("conditional_second_moment", 2, 1, 0.0)),
}
ROUNDING = {
    "nearest": lambda x: np.floor(x + 0.5),
    "ceil": np.ceil,
    "none": lambda x: x,
}
ESTIMATORS = ("breslow", "unweighted", "weighted1", "weighted2", "weighted3", "weighted4")


@dataclass(frozen=True)
class CompetingConfig:
    """Event hazard ``kappa_event (theta t)^nu e^{beta0'Z}`` and competing
    hazard ``kappa_competing (theta t)^nu e^{beta_c'Z}``."""

    kappa_event: float = 1.0
    kappa_competing: float = 1.0
    beta_c: tuple[float, ...] = (0.0, 0.0)


@dataclass(frozen=True)
class ScenarioConfig:
    baseline_source: tuple[float, float] = WEIBULL_SCENARIOS["A1"]
    baseline_target: tuple[float, float] = TARGET_BASELINE
    covariate_config: str | CovariateDesign = "C1"
    source_covariates: str | CovariateDesign = "C1"
    beta0: tuple[float, ...] = (LOG2, LOG2)
    censor_zeta: float = -5.0
    censor_mean: float = 40.0
    censor_sd: float = 15.0
    censor_bounds: tuple[float, float] = (1.0, 100.0)
    target_censor_zeta: float | None = None
    rounding: str = "nearest"
    n_source: int = 1000
    m_target: int = 100_000
    estimators: tuple[str, ...] = ESTIMATORS
    replicates: int = 500
    seed: int = 42
    competing: CompetingConfig | None = None
    diag_approx: bool = True
    ci_level: float = 0.95
    cad_horizon: int = 60
    workers: int | None = None

    def __post_init__(self):
        for th, nu in (self.baseline_source, self.baseline_target):
            if th <= 0 or nu <= 0:
                raise ValueError("Weibull parameters must be positive")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.n_source < 2 or self.m_target < 2:
            raise ValueError("cohort sizes must be at least 2")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        if self.rounding not in ROUNDING:
            raise ValueError(f"rounding must be one of {sorted(ROUNDING)}")
        self.design("source")
        self.design("target")

    @classmethod
    def from_names(cls, scenario: str = "A1", covariates: str = "C1", **kw) -> "ScenarioConfig":
        if scenario not in WEIBULL_SCENARIOS:
            raise ValueError(f"unknown scenario {scenario!r}")
        if covariates not in COVARIATE_DESIGNS:
            raise ValueError(f"unknown covariate configuration {covariates!r}")
        return cls(baseline_source=WEIBULL_SCENARIOS[scenario], covariate_config=covariates, **kw)

    def design(self, which: str) -> CovariateDesign:
        d = self.source_covariates if which == "source" else self.covariate_config
        if isinstance(d, CovariateDesign):
            return d
        if d not in COVARIATE_DESIGNS:
            raise ValueError(f"unknown covariate configuration {d!r}")
        return COVARIATE_DESIGNS[d]

    def baseline(self, which: str) -> tuple[float, float]:
        return self.baseline_source if which == "source" else self.baseline_target

    def true_lambda0(self, t) -> np.ndarray:
        th, nu = self.baseline_target
        k = 1.0 if self.competing is None else self.competing.kappa_event
        return k * (th * np.asarray(t, dtype=float)) ** nu

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("covariate_config", "source_covariates"):
            v = getattr(self, key)
            d[key] = v if isinstance(v, str) else asdict(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("covariate_config", "source_covariates"):
            if isinstance(d.get(key), dict):
                d[key] = CovariateDesign(**d[key])
        if d.get("competing") is not None and isinstance(d["competing"], dict):
            c = dict(d["competing"])
            c["beta_c"] = tuple(c.get("beta_c", (0.0, 0.0)))
            d["competing"] = CompetingConfig(**c)
        for key in ("baseline_source", "baseline_target", "beta0", "censor_bounds", "estimators"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    """Counter-based stream for one replicate; identical in serial and parallel runs."""
    return np.random.Generator(np.random.Philox(key=(int(seed) ^ int(rep)) & (2**64 - 1)))


def weibull_inverse(u_exp: np.ndarray, theta: float, nu: float, kappa: float, lp: np.ndarray):
    """Time with ``kappa (theta T)^nu e^{lp} = u_exp``; infinite when ``kappa == 0``."""
    if kappa == 0:
        return np.full(np.shape(u_exp), np.inf)
    return (u_exp * np.exp(-lp) / kappa) ** (1.0 / nu) / theta


def _draw(config: ScenarioConfig, which: str, rng: np.random.Generator, size: int) -> dict:
    d = config.design(which)
    z1 = (rng.random(size) < d.p1).astype(float)
    eps = rng.standard_normal(size)
    z2 = np.where(z1 == 1, d.mean1 + d.sd1 * eps, d.mean0 + d.sd0 * eps)
    z = np.column_stack((z1, z2))
    th, nu = config.baseline(which)
    comp = config.competing
    k_ev = 1.0 if comp is None else comp.kappa_event
    t_ev = weibull_inverse(rng.standard_exponential(size), th, nu, k_ev, z @ np.asarray(config.beta0))
    if comp is not None:
        t_c = weibull_inverse(rng.standard_exponential(size), th, nu, comp.kappa_competing,
                              z @ np.asarray(comp.beta_c))
    else:
        t_c = np.full(size, np.inf)
    lo, hi = config.censor_bounds
    zeta = config.censor_zeta
    if which == "target" and config.target_censor_zeta is not None:
        zeta = config.target_censor_zeta
    c = config.censor_mean + zeta * z1 + config.censor_sd * rng.standard_normal(size)
    c = np.clip(c, lo, hi)
    first = np.minimum(np.minimum(t_ev, t_c), c)
    event = np.where(t_ev == first, 1, np.where(t_c == first, 2, 0))
    event[c == first] = 0
    x = ROUNDING[config.rounding](first)
    if config.rounding != "none":
        # a time rounded to 0 would leave its subject outside every risk set
        x = np.maximum(x, 1.0)
    return {"z": z, "t_event": t_ev, "t_competing": t_c, "censor": c, "exit": x, "event": event}


def generate_cohort(config: ScenarioConfig, which: str, rng: np.random.Generator,
                    size: int | None = None) -> Cohort:
    """Draw a source or target cohort; observed times are rounded to integers."""
    if which not in ("source", "target"):
        raise ValueError("which must be 'source' or 'target'")
    if size is None:
        size = config.n_source if which == "source" else config.m_target
    d = _draw(config, which, rng, size)
    return Cohort(np.zeros(size), d["exit"], d["event"], d["z"], ("z1", "z2"))


def summarize_target(cohort: Cohort, times, constraint_items: Sequence[Constraint] | None = None,
                     m: int | None = None, survival: str = "kaplan_meier") -> TargetSummary:
    """Disease-free probabilities with their covariance plus moment targets.

    ``survival="kaplan_meier"`` uses the product-limit curve with Greenwood
    covariance; ``"nelson_aalen"`` uses ``exp(-Lambda-hat)`` with the
    delta-method covariance ``S(s) S(t) var(Lambda-hat(min(s, t)))``.
    Competing events are censored. Moment targets are sample means of the
    constraint rows with covariance ``cov(h) / m``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(at_risk_counts(cohort, times) <= 0):
        bad = times[at_risk_counts(cohort, times) <= 0][0]
        raise HazrecalError(f"no target subject is at risk at t={bad:g}")
    m = cohort.n if m is None else int(m)
    if survival == "kaplan_meier":
        surv, var = kaplan_meier(cohort)
        s = np.asarray(surv(times), dtype=float)
        v = np.asarray(var(times), dtype=float)
        s_cov = greenwood_covariance(surv, var, times)
    elif survival == "nelson_aalen":
        cum, cvar = nelson_aalen(cohort, with_variance=True)
        s = np.exp(-np.asarray(cum(times), dtype=float))
        cv = np.asarray(cvar(times), dtype=float)
        s_cov = np.outer(s, s) * cv[np.minimum.outer(np.arange(s.size), np.arange(s.size))]
        v = np.diag(s_cov).copy()
    else:
        raise ValueError("survival must be 'kaplan_meier' or 'nelson_aalen'")
    spec = None
    if constraint_items:
        H = evaluate_constraints(cohort, constraint_items)
        cov = np.atleast_2d(np.cov(H, rowvar=False, ddof=1)) / m
        spec = ConstraintSpec(tuple(constraint_items), H.mean(axis=0), np.diag(cov).copy(), cov, m)
    return TargetSummary(times=times, survival=s, survival_variance=v, m=m,
                         survival_covariance=s_cov, constraints=spec)


# --- one replicate -------------------------------------------------------

@dataclass
class ReplicateResult:
    rep: int
    estimates: dict[str, np.ndarray] = field(default_factory=dict)   # at eval times
    se: dict[str, np.ndarray] = field(default_factory=dict)
    cad: dict[str, float] = field(default_factory=dict)
    error: str | None = None


def _target_parts(target: Cohort, grid: np.ndarray, estimators: Iterable[str], m: int):
    surv, var = kaplan_meier(target)
    s = np.asarray(surv(grid), dtype=float)
    v = np.asarray(var(grid), dtype=float)
    specs = {}
    for name in estimators:
        if name in CONSTRAINT_SETS:
            items = CONSTRAINT_SETS[name]
            H = evaluate_constraints(target, items)
            cov = np.atleast_2d(np.cov(H, rowvar=False, ddof=1)) / m
            specs[name] = ConstraintSpec(items, H.mean(axis=0), np.diag(cov).copy(), cov, m)
    return s, v, specs


def run_replicate(config: ScenarioConfig, eval_times: np.ndarray, rep: int) -> ReplicateResult:
    rng = replicate_rng(config.seed, rep)
    out = ReplicateResult(rep)
    try:
        source = generate_cohort(config, "source", rng)
        target = generate_cohort(config, "target", rng)
        fit = fit_cox(source)
        eval_times = np.asarray(eval_times, dtype=float)
        grid = np.union1d(np.arange(1, config.cad_horizon + 1, dtype=float), eval_times)
        if np.any(at_risk_counts(target, grid) <= 0):
            raise HazrecalError("no target subject at risk at a requested time")
        ev_idx = np.searchsorted(grid, eval_times)
        cad_idx = np.searchsorted(grid, np.arange(1, config.cad_horizon + 1))
        truth = config.true_lambda0(grid)
        s, v, specs = _target_parts(target, grid, config.estimators, target.n)
        surv, var = kaplan_meier(target)
        s_cov = greenwood_covariance(surv, var, grid[ev_idx])
        full_cov = np.zeros((grid.size, grid.size))
        full_cov[np.ix_(ev_idx, ev_idx)] = s_cov
        for name in config.estimators:
            if name == "breslow":
                lam = np.asarray(fit.breslow_baseline(grid), dtype=float)
                se = np.sqrt(breslow_variance(source, fit, grid[ev_idx]))
            else:
                mode = "unweighted" if name == "unweighted" else "weighted"
                summ = TargetSummary(grid, s, v, target.n, survival_covariance=full_cov,
                                     constraints=specs.get(name))
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    eng = _Engine(source, fit, summ, mode, config.diag_approx, None)
                lam = np.array([eng.solve(x) for x in s])
                cov, _ = eng.covariance(lam[ev_idx], ev_idx)
                se = np.sqrt(np.clip(np.diag(cov), 0, None))
            out.estimates[name] = lam[ev_idx]
            out.se[name] = se
            out.cad[name] = float(np.abs(lam[cad_idx] - truth[cad_idx]).sum())
    except (HazrecalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    return out


# --- aggregation ---------------------------------------------------------

@dataclass(frozen=True)
class MetricsRow:
    estimator: str
    time: float
    truth: float
    pbias: float
    esd: float
    ase: float
    smse: float
    cp: float
    cad: float
    replicates: int


def aggregate(results: Sequence[ReplicateResult], config: ScenarioConfig,
              eval_times: np.ndarray) -> list[MetricsRow]:
    ok = [r for r in results if r.error is None]
    R = len(ok)
    zq = _z(config.ci_level)
    rows = []
    truth = config.true_lambda0(eval_times)
    for name in config.estimators:
        est = np.array([r.estimates[name] for r in ok]).reshape(R, -1)
        se = np.array([r.se[name] for r in ok]).reshape(R, -1)
        cad = float(np.mean([r.cad[name] for r in ok])) if R else math.nan
        for k, t in enumerate(eval_times):
            x, s, tr = est[:, k], se[:, k], truth[k]
            lo = np.maximum(x - zq * s, 0.0)
            hi = x + zq * s
            rows.append(MetricsRow(
                estimator=name, time=float(t), truth=float(tr),
                pbias=float(100 * np.mean(x - tr) / tr) if R else math.nan,
                esd=float(np.std(x, ddof=1)) if R > 1 else math.nan,
                ase=float(np.mean(s)) if R else math.nan,
                smse=float(np.sqrt(np.mean((x - tr) ** 2))) if R else math.nan,
                cp=float(100 * np.mean((lo <= tr) & (tr <= hi))) if R else math.nan,
                cad=cad, replicates=R,
            ))
    return rows


def _z(level: float) -> float:
    from scipy.stats import norm
    return float(norm.ppf(0.5 + level / 2))


def default_workers() -> int:
    env = os.environ.get("HAZRECAL_WORKERS")
    return max(1, int(env)) if env else 1


def _run_chunk(args):
    config, eval_times, reps = args
    return [run_replicate(config, eval_times, r) for r in reps]


def run_replicates(config: ScenarioConfig, eval_times) -> list[ReplicateResult]:
    eval_times = np.asarray(eval_times, dtype=float)
    reps = list(range(config.replicates))
    workers = config.workers or default_workers()
    if workers <= 1:
        return [run_replicate(config, eval_times, r) for r in reps]
    chunks = [reps[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(_run_chunk, [(config, eval_times, c) for c in chunks]))
    results = [r for part in parts for r in part]
    return sorted(results, key=lambda r: r.rep)


def _check_failures(results: Sequence[ReplicateResult]) -> int:
    failed = sum(r.error is not None for r in results)
    if failed and failed >= 0.01 * len(results):
        first = next(r.error for r in results if r.error is not None)
        raise SimulationError(f"{failed} of {len(results)} replicates failed (first: {first})")
    return failed


def run_scenario(config: ScenarioConfig, eval_times=(20, 40, 60)) -> list[MetricsRow]:
    """Metrics table for every estimator at ``eval_times``.

    Failed replicates are excluded; the run fails if they reach 1%.
    """
    eval_times = np.asarray(eval_times, dtype=float)
    results = run_replicates(config, eval_times)
    _check_failures(results)
    return aggregate(results, config, eval_times)


def metrics_to_csv(rows: Sequence[MetricsRow], config: ScenarioConfig | None = None,
                   missing: str = "NA") -> str:
    """Tidy CSV; the effective config is echoed on a leading ``#`` line."""
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config.to_dict(), sort_keys=True) + "\n")
    fields = list(MetricsRow.__dataclass_fields__)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        vals = []
        for f in fields:
            v = getattr(row, f)
            if isinstance(v, float):
                vals.append(missing if math.isnan(v) else repr(v))
            else:
                vals.append(v)
        w.writerow(vals)
    return buf.getvalue()


# --- competing-risk sensitivity -------------------------------------------

@dataclass(frozen=True)
class ContourRow:
    kappa_event: float
    kappa_competing: float
    p_event: float
    ratio: float
    corr: float
    max_pbias: float
    min_cp: float
    failed: int


def competing_summary(config: ScenarioConfig, rng: np.random.Generator, size: int = 200_000):
    """Population probabilities of observing each event type and corr(beta0'Z, T_c)."""
    d = _draw(config, "target", rng, size)
    p_ev = float(np.mean(d["event"] == 1))
    p_c = float(np.mean(d["event"] == 2))
    lp = d["z"] @ np.asarray(config.beta0)
    tc = d["t_competing"]
    corr = float(np.corrcoef(lp, tc)[0, 1]) if np.all(np.isfinite(tc)) else math.nan
    return p_ev, (p_c / p_ev if p_ev > 0 else math.inf), corr


def run_competing_contour(config: ScenarioConfig, kappa_event: Sequence[float],
                          kappa_competing: Sequence[float], beta_c: Sequence[float],
                          eval_times=(20, 40, 60), estimator: str = "weighted4"
                          ) -> list[ContourRow]:
    """Maximal |PBias| and minimal CP of one estimator over a hazard-scale grid."""
    eval_times = np.asarray(eval_times, dtype=float)
    rows = []
    for ke in kappa_event:
        for kc in kappa_competing:
            comp = CompetingConfig(float(ke), float(kc), tuple(float(b) for b in beta_c))
            cfg = replace(config, competing=comp, estimators=(estimator,))
            results = run_replicates(cfg, eval_times)
            failed = _check_failures(results)
            metrics = aggregate(results, cfg, eval_times)
            p_ev, ratio, corr = competing_summary(cfg, replicate_rng(cfg.seed, 2**32 + 1))
            rows.append(ContourRow(
                kappa_event=float(ke), kappa_competing=float(kc), p_event=p_ev, ratio=ratio,
                corr=corr, max_pbias=max(abs(m.pbias) for m in metrics),
                min_cp=min(m.cp for m in metrics), failed=failed,
            ))
    return rows


def contour_to_csv(rows: Sequence[ContourRow], config: ScenarioConfig | None = None) -> str:
    buf = io.StringIO()
    if config is not None:
        buf.write("# config: " + json.dumps(config.to_dict(), sort_keys=True) + "\n")
    fields = list(ContourRow.__dataclass_fields__)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(row, f) for f in fields)])
    return buf.getvalue()


# --- empirical absolute risk -----------------------------------------------

def aalen_johansen(cohort: Cohort, t0: float, times) -> np.ndarray:
    """Nonparametric cumulative incidence of event 1 in ``(t0, t]`` among those at risk after t0.

    A standard stand-in for calibration checks of projected absolute risk.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    keep = cohort.exit > t0
    sub = cohort.subset(np.flatnonzero(keep))
    sub = Cohort(np.maximum(sub.entry, t0), sub.exit, sub.event, sub.covariates,
                 sub.covariate_names)
    ev = sub.counted_events(1) | sub.counted_events(2)
    ut = np.unique(sub.exit[ev])
    if ut.size == 0:
        return np.zeros(times.size)
    n_risk = at_risk_counts(sub, ut)
    d1 = np.array([np.sum((sub.exit == u) & sub.counted_events(1)) for u in ut], dtype=float)
    d2 = np.array([np.sum((sub.exit == u) & sub.counted_events(2)) for u in ut], dtype=float)
    s_prev = np.concatenate(([1.0], np.cumprod(1 - (d1 + d2) / n_risk)[:-1]))
    cif = np.cumsum(s_prev * d1 / n_risk)
    idx = np.searchsorted(ut, times, side="right") - 1
    return np.where(idx >= 0, cif[np.maximum(idx, 0)], 0.0)


# --- registry-style absolute-risk study ----------------------------------

@dataclass(frozen=True)
class BinaryCohortDesign:
    """Independent binary risk factors, Weibull event and competing hazards,
    uniform censoring. Hazards are ``(theta t)^nu e^{beta'Z}``."""

    prevalence: tuple[float, ...]
    theta: float
    nu: float
    theta_c: float
    nu_c: float
    censor_range: tuple[float, float]
    size: int


# Eight binary risk factors; prevalences and hazard ratios resemble a large
# colorectal-cancer cohort (source) and an English biobank subset (target).
# Scales give 5-year event rates near 0.7% and 0.5% and other-cause death
# rates near 3.8% and 1.4%.
UKB_LOG_HR = tuple(math.log(h) for h in (0.79, 1.24, 0.99, 0.83, 0.76, 0.94, 1.39, 0.87))
UKB_LOG_HR_COMPETING = (0.0, 0.0, 0.26, 0.0, -0.1, 0.0, 0.3, 0.0)
UKB_SOURCE = BinaryCohortDesign(
    prevalence=(0.562, 0.147, 0.149, 0.121, 0.850, 0.530, 0.228, 0.449),
    theta=0.0293, nu=2.4, theta_c=0.0160, nu_c=1.3, censor_range=(2.0, 12.0), size=76_733)
UKB_TARGET = BinaryCohortDesign(
    prevalence=(0.377, 0.119, 0.339, 0.145, 0.246, 0.464, 0.241, 0.083),
    theta=0.00774, nu=1.6, theta_c=0.0067, nu_c=1.3, censor_range=(2.0, 12.0), size=175_248)


def generate_binary_cohort(design: BinaryCohortDesign, beta, beta_c, rng: np.random.Generator,
                           size: int | None = None) -> Cohort:
    size = design.size if size is None else int(size)
    prev = np.asarray(design.prevalence)
    z = (rng.random((size, prev.size)) < prev).astype(float)
    t_ev = weibull_inverse(rng.standard_exponential(size), design.theta, design.nu, 1.0,
                           z @ np.asarray(beta, dtype=float))
    t_c = weibull_inverse(rng.standard_exponential(size), design.theta_c, design.nu_c, 1.0,
                          z @ np.asarray(beta_c, dtype=float))
    c = rng.uniform(*design.censor_range, size=size)
    first = np.minimum(np.minimum(t_ev, t_c), c)
    event = np.where(t_ev == first, 1, np.where(t_c == first, 2, 0))
    names = tuple(f"x{j + 1}" for j in range(prev.size))
    return Cohort(np.zeros(size), first, event, z, names)


@dataclass
class AbsRiskStudy:
    profiles: np.ndarray
    risk: np.ndarray        # (replicates, profiles)
    se: np.ndarray
    failed: int

    @property
    def mc_sd(self) -> np.ndarray:
        return self.risk.std(axis=0, ddof=1)

    @property
    def mean_se(self) -> np.ndarray:
        return self.se.mean(axis=0)


def _absrisk_replicate(args):
    from .absrisk import AbsoluteRiskInput, predict_batch
    from .recalib import recalibrate
    from .survival import StepFunction, nelson_aalen

    (source, target, beta, beta_c, profiles, grid, t0, t1, seed, rep, sizes) = args
    rng = replicate_rng(seed, rep)
    try:
        src = generate_binary_cohort(source, beta, beta_c, rng, sizes[0])
        tgt = generate_binary_cohort(target, beta, beta_c, rng, sizes[1])
        fit = fit_cox(src)
        items = tuple(Constraint("raw_moment", j + 1) for j in range(src.p))
        summ = summarize_target(tgt, grid, items)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rec = recalibrate(src, fit, summ, mode="weighted")
        na, na_var = nelson_aalen(tgt, event_code=2, with_variance=True)
        template = AbsoluteRiskInput(
            t0=t0, t1=t1, z=np.zeros(src.p), lambda0=StepFunction(grid, rec.lambda0, 0.0),
            beta=fit.beta_hat, lambda_c=StepFunction(grid, np.asarray(na(grid)), 0.0),
            sigma_beta=fit.sigma_beta, cov_lambda=rec.cov_lambda,
            cov_beta_lambda=rec.cov_beta_lambda, var_lambda_c=np.asarray(na_var(grid)))
        risk, se = predict_batch(profiles, t0, t1, template, with_variance=True)
        return rep, risk, se, None
    except (HazrecalError, np.linalg.LinAlgError) as exc:
        return rep, None, None, f"{type(exc).__name__}: {exc}"


def run_absrisk_study(profiles, replicates: int = 300, seed: int = 7,
                      source: BinaryCohortDesign = UKB_SOURCE,
                      target: BinaryCohortDesign = UKB_TARGET,
                      beta=UKB_LOG_HR, beta_c=UKB_LOG_HR_COMPETING,
                      grid=tuple(range(1, 11)), t0: float = 0.0, t1: float = 10.0,
                      sizes: tuple[int | None, int | None] = (None, None),
                      workers: int | None = None) -> AbsRiskStudy:
    """Delta-method SE of the projected absolute risk against its Monte-Carlo spread.

    Each replicate fits the Cox model on the source, recalibrates the baseline
    to the target's Kaplan-Meier curve on ``grid`` with all risk-factor means
    as constraints, takes the competing hazard from the target's Nelson-Aalen
    curve, and projects risk in ``(t0, t1]`` for each row of ``profiles``.
    """
    profiles = np.atleast_2d(np.asarray(profiles, dtype=float))
    grid = np.asarray(grid, dtype=float)
    jobs = [(source, target, beta, beta_c, profiles, grid, t0, t1, seed, r, sizes)
            for r in range(replicates)]
    workers = workers or default_workers()
    if workers <= 1:
        out = [_absrisk_replicate(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_absrisk_replicate, jobs, chunksize=max(1, replicates // workers)))
    ok = [o for o in out if o[3] is None]
    failed = len(out) - len(ok)
    if failed and failed >= 0.01 * len(out):
        raise SimulationError(f"{failed} of {len(out)} replicates failed (first: "
                              f"{next(o[3] for o in out if o[3] is not None)})")
    return AbsRiskStudy(profiles, np.array([o[1] for o in ok]), np.array([o[2] for o in ok]),
                        failed)
