"""Recalibration of the cumulative baseline hazard to a target population.

For each requested time ``t`` the recalibrated ``V = Lambda_0(t)`` solves

    sum_i w_i [exp(-V exp(beta'Z_i)) - S(t)] = 0,

with uniform weights (unweighted estimator) or empirical-likelihood weights
matching target covariate moments (weighted estimator). Inference uses the
plug-in sandwich built from the stacked estimating functions

    rho_1 = Phi / D,    Q = (h - mu) / D,    D = 1 + gamma'(h - mu),

plus external noise from beta-hat, S-hat and mu-hat.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.optimize import brentq, isotonic_regression
from scipy.stats import norm

from .cox import CoxFit
from .el import ConstraintSpec, ELWeights, evaluate_constraints, solve_el_dual
from .errors import CohortError, HazrecalError
from .survival import Cohort

Mode = Literal["unweighted", "weighted"]


@dataclass(frozen=True, eq=False)
class TargetSummary:
    times: np.ndarray
    survival: np.ndarray
    survival_variance: np.ndarray
    m: int
    survival_covariance: np.ndarray | None = None
    constraints: ConstraintSpec | None = None
    mu_s_covariance: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        surv = np.asarray(self.survival, dtype=float).reshape(-1)
        var = np.asarray(self.survival_variance, dtype=float).reshape(-1)
        s = times.shape[0]
        if surv.shape[0] != s or var.shape[0] != s:
            raise ValueError("times, survival and survival_variance must have equal length")
        if s and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(times <= 0):
            raise ValueError("times must be positive")
        if np.any(surv <= 0) or np.any(surv > 1):
            raise CohortError("target survival must lie in (0, 1]")
        if np.any(np.diff(surv) > 1e-12):
            raise ValueError("target survival must be nonincreasing in time")
        if np.any(var < 0):
            raise ValueError("survival variances must be nonnegative")
        if int(self.m) < 1:
            raise ValueError("m must be at least 1")
        cov = self.survival_covariance
        if cov is not None:
            cov = np.asarray(cov, dtype=float)
            if cov.shape != (s, s):
                raise ValueError("survival_covariance must be s x s")
        musc = self.mu_s_covariance
        if musc is not None:
            musc = np.asarray(musc, dtype=float)
            q = self.constraints.q if self.constraints is not None else 0
            if musc.shape != (q, s):
                raise ValueError("mu_s_covariance must be q x s")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "survival", surv)
        object.__setattr__(self, "survival_variance", var)
        object.__setattr__(self, "survival_covariance", cov)
        object.__setattr__(self, "mu_s_covariance", musc)
        object.__setattr__(self, "m", int(self.m))

    @property
    def s(self) -> int:
        return self.times.shape[0]

    def s_cov(self) -> np.ndarray:
        if self.survival_covariance is not None:
            return self.survival_covariance
        return np.diag(self.survival_variance)

    def to_dict(self) -> dict:
        d = {
            "times": self.times.tolist(),
            "survival": self.survival.tolist(),
            "survival_variance": self.survival_variance.tolist(),
            "m": self.m,
        }
        if self.survival_covariance is not None:
            d["survival_covariance"] = self.survival_covariance.tolist()
        if self.constraints is not None:
            d["constraints"] = self.constraints.to_dict()
        if self.mu_s_covariance is not None:
            d["mu_s_covariance"] = self.mu_s_covariance.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TargetSummary":
        cons = d.get("constraints")
        return cls(
            times=d["times"],
            survival=d["survival"],
            survival_variance=d.get("survival_variance", [0.0] * len(d["times"])),
            m=d["m"],
            survival_covariance=d.get("survival_covariance"),
            constraints=None if cons is None else ConstraintSpec.from_dict(cons),
            mu_s_covariance=d.get("mu_s_covariance"),
        )


@dataclass(frozen=True, eq=False)
class RecalResult:
    times: np.ndarray
    lambda0: np.ndarray
    method: str
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    cov_lambda: np.ndarray
    cov_beta_lambda: np.ndarray
    ci_level: float = 0.95
    gamma_hat: np.ndarray | None = None
    weights: np.ndarray | None = None
    isotonic: bool = False
    warnings: tuple[str, ...] = field(default=())

    def to_dict(self, include_weights: bool = False) -> dict:
        d = {
            "method": self.method,
            "ci_level": self.ci_level,
            "times": self.times.tolist(),
            "lambda0": self.lambda0.tolist(),
            "se": self.se.tolist(),
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
            "cov_lambda": self.cov_lambda.tolist(),
            "cov_beta_lambda": self.cov_beta_lambda.tolist(),
            "isotonic": self.isotonic,
            "warnings": list(self.warnings),
        }
        if self.gamma_hat is not None:
            d["gamma_hat"] = self.gamma_hat.tolist()
        if include_weights and self.weights is not None:
            d["weights"] = self.weights.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecalResult":
        def arr(key):
            return None if d.get(key) is None else np.asarray(d[key], dtype=float)
        return cls(
            times=arr("times"), lambda0=arr("lambda0"), method=d["method"], se=arr("se"),
            ci_lower=arr("ci_lower"), ci_upper=arr("ci_upper"),
            cov_lambda=arr("cov_lambda"), cov_beta_lambda=arr("cov_beta_lambda"),
            ci_level=float(d.get("ci_level", 0.95)), gamma_hat=arr("gamma_hat"),
            weights=arr("weights"), isotonic=bool(d.get("isotonic", False)),
            warnings=tuple(d.get("warnings", ())),
        )


# --- estimating equation -------------------------------------------------

def phi(z, V: float, beta, S: float) -> float:
    """``exp(-V exp(beta'z)) - S``."""
    return float(np.exp(-V * np.exp(np.dot(beta, z))) - S)


def _solve_root(r: np.ndarray, w: np.ndarray, S: float, tol: float) -> float:
    """Root of ``sum w_i exp(-V r_i) - S`` for ``r_i > 0`` and ``sum w = 1``.

    The weighted mean of ``exp(-V r_i)`` lies between ``exp(-V r_max)`` and
    ``exp(-V r_min)``, so ``[-log S / r_max, -log S / r_min]`` always
    brackets the root.
    """
    if not 0 < S <= 1:
        raise CohortError(f"target survival must lie in (0, 1], got {S}")
    if S == 1.0:
        return 0.0
    ls = -np.log(S)
    lo, hi = ls / r.max(), ls / r.min()
    if hi - lo <= 1e-15 * hi:
        return lo

    def f(v):
        return float(w @ np.exp(-v * r)) - S

    root = brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(f(root)) > tol:
        # Brent stops on bracket width; polish with a Newton step if needed
        root -= f(root) / float(-(w * r) @ np.exp(-root * r))
    return root


def solve_unweighted(cohort: Cohort, beta, S_t: float, tol: float = 1e-12) -> float:
    r = np.exp(cohort.covariates @ np.asarray(beta, dtype=float))
    return _solve_root(r, np.full(cohort.n, 1.0 / cohort.n), S_t, tol)


def solve_weighted(cohort: Cohort, beta, S_t: float, weights, tol: float = 1e-12) -> float:
    w = np.asarray(weights, dtype=float)
    if w.shape != (cohort.n,) or np.any(w <= 0):
        raise ValueError("weights must be n positive values")
    if abs(w.sum() - 1) > 1e-8:
        raise ValueError("weights must sum to 1")
    r = np.exp(cohort.covariates @ np.asarray(beta, dtype=float))
    return _solve_root(r, w, S_t, tol)


# --- stacked estimating functions and their derivatives ------------------

def rho_terms(z: np.ndarray, h: np.ndarray | None, V: float, beta, S: float,
              gamma=None, mu=None, matrices: bool = True) -> dict[str, np.ndarray]:
    """Per-subject values and analytic derivatives of ``rho_1`` and ``Q``.

    Returns arrays with the subject index first. With ``h=None`` the
    constraint block is absent and ``D = 1`` (the unweighted case).
    ``matrices=False`` skips the ``(n, q, q)`` derivatives of ``Q``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    beta = np.asarray(beta, dtype=float)
    r = np.exp(z @ beta)
    e = np.exp(-V * r)
    Phi = e - S
    out = {
        "phi": Phi,
        "phi_lambda": -r * e,
        "phi_beta": (-V * r * e)[:, None] * z,
    }
    if h is None:
        D = np.ones(z.shape[0])
        g = None
    else:
        g = np.atleast_2d(np.asarray(h, dtype=float)) - np.asarray(mu, dtype=float)
        D = 1.0 + g @ np.asarray(gamma, dtype=float)
    out["D"] = D
    out["rho1"] = Phi / D
    out["rho1_lambda"] = out["phi_lambda"] / D
    out["rho1_beta"] = out["phi_beta"] / D[:, None]
    out["rho1_S"] = -1.0 / D
    if g is not None:
        gamma = np.asarray(gamma, dtype=float)
        D2 = D**2
        q = g.shape[1]
        out["rho1_gamma"] = -(Phi / D2)[:, None] * g
        out["rho1_mu"] = (Phi / D2)[:, None] * gamma
        out["Q"] = g / D[:, None]
        if not matrices:
            return out
        out["Q_gamma"] = -(g[:, :, None] * g[:, None, :]) / D2[:, None, None]
        out["Q_mu"] = (-np.eye(q)[None] / D[:, None, None]
                       + (g[:, :, None] * gamma[None, None, :]) / D2[:, None, None])
    return out


@dataclass
class _Sandwich:
    """Ingredients of the influence expansion at one time point."""

    psi: np.ndarray          # (n,) internal influence
    rho_lambda: float        # E rho_{1,Lambda}
    b: np.ndarray            # (p,) E rho_{1,beta}
    c: float                 # E rho_{1,S}
    pi14: np.ndarray | None  # (q,) sensitivity to mu-hat


class _Engine:
    """Shared per-cohort quantities for recalibration at many times."""

    def __init__(self, cohort: Cohort, fit: CoxFit, summary: TargetSummary, mode: Mode,
                 diag_approx: bool, el_options: dict | None):
        if fit.p != cohort.p:
            raise ValueError(f"model has p={fit.p} but cohort has p={cohort.p}")
        self.cohort, self.fit, self.summary, self.mode = cohort, fit, summary, mode
        self.z = cohort.covariates
        self.beta = fit.beta_hat
        self.r = np.exp(self.z @ self.beta)
        n = cohort.n
        self.warnings: list[str] = []
        self.el: ELWeights | None = None
        self.g = None
        if mode == "weighted":
            spec = summary.constraints
            if spec is None:
                raise HazrecalError("weighted recalibration needs constraints in the target summary")
            H = evaluate_constraints(cohort, spec)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self.el = solve_el_dual(H, spec.targets, **(el_options or {}))
            self.warnings.extend(self.el.warnings)
            self.w = self.el.weights
            self.gamma = self.el.gamma_hat
            self.g = H - spec.targets
            D = 1.0 + self.g @ self.gamma
            gd = self.g / D[:, None]
            A = -(gd.T @ gd) / n
            self.A_inv = np.linalg.inv(A) if np.linalg.cond(A) < 1e14 else None
            if self.A_inv is None:
                raise HazrecalError("E[Q_gamma] is singular; the constraints are degenerate")
            self.Q = gd
            self.M = (-np.mean(1.0 / D) * np.eye(spec.q)
                      + np.outer((self.g / (D**2)[:, None]).mean(axis=0), self.gamma))
            self.sigma_mu = spec.sigma_mu(diag_approx)
            self.mu_s = (summary.mu_s_covariance if summary.mu_s_covariance is not None
                         else np.zeros((spec.q, summary.s)))
        elif mode == "unweighted":
            self.w = np.full(n, 1.0 / n)
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def solve(self, S: float) -> float:
        return _solve_root(self.r, self.w, S, 1e-12)

    def terms(self, V: float, S: float) -> _Sandwich:
        if self.g is None:
            t = rho_terms(self.z, None, V, self.beta, S)
            return _Sandwich(t["rho1"], float(t["rho1_lambda"].mean()),
                             t["rho1_beta"].mean(axis=0), float(t["rho1_S"].mean()), None)
        t = rho_terms(self.z, self.g, V, self.beta, S, self.gamma, np.zeros(self.g.shape[1]),
                      matrices=False)
        a = t["rho1_gamma"].mean(axis=0)
        Aa = self.A_inv @ a
        psi = t["rho1"] - self.Q @ Aa
        pi14 = t["rho1_mu"].mean(axis=0) - self.M.T @ Aa
        return _Sandwich(psi, float(t["rho1_lambda"].mean()), t["rho1_beta"].mean(axis=0),
                         float(t["rho1_S"].mean()), pi14)

    def covariance(self, lam: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Covariance of the estimates at ``summary.times[idx]`` and with beta-hat."""
        n = self.cohort.n
        S = self.summary.survival[idx]
        sw = [self.terms(v, s) for v, s in zip(lam, S)]
        psi = np.column_stack([x.psi for x in sw])
        rl = np.array([x.rho_lambda for x in sw])
        B = np.column_stack([x.b for x in sw])
        c = np.array([x.c for x in sw])
        sig_b = self.fit.sigma_beta
        inner = psi.T @ psi / n / n
        inner += B.T @ sig_b @ B
        inner += np.outer(c, c) * self.summary.s_cov()[np.ix_(idx, idx)]
        if self.g is not None:
            P = np.column_stack([x.pi14 for x in sw])
            inner += P.T @ self.sigma_mu @ P
            cross = P.T @ self.mu_s[:, idx] * c[None, :]
            inner += cross + cross.T
        cov = inner / np.outer(rl, rl)
        cov = 0.5 * (cov + cov.T)
        cov_bl = -(sig_b @ B) / rl[None, :]
        return cov, cov_bl


def recalibrate(cohort: Cohort, fit: CoxFit, summary: TargetSummary, mode: Mode = "weighted",
                ci_level: float = 0.95, diag_approx: bool = False, isotonic: bool = False,
                with_variance: bool = True, el_options: dict | None = None) -> RecalResult:
    """Recalibrated cumulative baseline hazard at ``summary.times``.

    Parameters
    ----------
    mode : {"weighted", "unweighted"}
        ``weighted`` needs ``summary.constraints``. EL weights are computed
        once and shared by all time points.
    diag_approx : bool
        Drop off-diagonal entries of the covariance of the target moments.
    isotonic : bool
        Project the estimates onto nondecreasing sequences. This is a
        presentation aid and not part of the estimator; the flag is recorded
        in the result.
    with_variance : bool
        Skip the sandwich when only point estimates are needed.
    """
    if not 0 < ci_level < 1:
        raise ValueError("ci_level must lie in (0, 1)")
    eng = _Engine(cohort, fit, summary, mode, diag_approx, el_options)
    lam = np.array([eng.solve(s) for s in summary.survival])
    if isotonic and lam.size > 1:
        lam = np.asarray(isotonic_regression(lam).x)
    s, p = summary.s, fit.p
    if with_variance:
        cov, cov_bl = eng.covariance(lam, np.arange(s))
    else:
        cov, cov_bl = np.full((s, s), np.nan), np.full((p, s), np.nan)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    zq = norm.ppf(0.5 + ci_level / 2)
    return RecalResult(
        times=summary.times.copy(), lambda0=lam, method=mode, se=se,
        ci_lower=np.maximum(lam - zq * se, 0.0), ci_upper=lam + zq * se,
        cov_lambda=cov, cov_beta_lambda=cov_bl, ci_level=ci_level,
        gamma_hat=None if eng.el is None else eng.el.gamma_hat,
        weights=None if eng.el is None else eng.el.weights,
        isotonic=isotonic, warnings=tuple(eng.warnings),
    )


def variance_unweighted(cohort: Cohort, fit: CoxFit, summary: TargetSummary,
                        lambda_hat: float, t_index: int) -> float:
    """Plug-in asymptotic variance of ``sqrt(n)(Lambda-hat - Lambda)`` for the unweighted root."""
    eng = _Engine(cohort, fit, summary, "unweighted", False, None)
    cov, _ = eng.covariance(np.array([lambda_hat]), np.array([t_index]))
    return float(cov[0, 0] * cohort.n)


def variance_weighted(cohort: Cohort, fit: CoxFit, summary: TargetSummary, lambda_hat: float,
                      gamma_hat=None, t_index: int = 0, diag_approx: bool = False) -> float:
    """Plug-in asymptotic variance for the weighted root.

    ``gamma_hat`` defaults to the EL solution for ``summary.constraints``;
    passing it explicitly skips the dual solve.
    """
    eng = _Engine(cohort, fit, summary, "weighted", diag_approx, None)
    if gamma_hat is not None and not np.allclose(gamma_hat, eng.gamma, rtol=1e-6, atol=1e-10):
        raise ValueError("gamma_hat does not match the EL solution for these constraints")
    cov, _ = eng.covariance(np.array([lambda_hat]), np.array([t_index]))
    return float(cov[0, 0] * cohort.n)


def influence_covariance(cohort: Cohort, fit: CoxFit, summary: TargetSummary,
                         recal: RecalResult, diag_approx: bool = False
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Cross-time covariance of the recalibrated hazards and their covariance with beta-hat."""
    eng = _Engine(cohort, fit, summary, recal.method, diag_approx, None)
    idx = np.searchsorted(summary.times, recal.times)
    return eng.covariance(recal.lambda0, idx)
