"""Cox proportional-hazards fit with Breslow ties and the Breslow baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import CoxFitError, ConvergenceError, EmptyRiskSetError, SingularInformationError
from .survival import Cohort, StepFunction

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class CoxFit:
    beta_hat: np.ndarray
    sigma_beta: np.ndarray
    breslow_baseline: StepFunction
    log_partial_likelihood: float
    iterations: int
    converged: bool
    covariate_names: tuple[str, ...] = ()
    trace: tuple[float, ...] = field(default=())

    @property
    def p(self) -> int:
        return self.beta_hat.shape[0]

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma_beta))

    def to_dict(self) -> dict:
        return {
            "covariate_names": list(self.covariate_names),
            "beta": self.beta_hat.tolist(),
            "sigma_beta": self.sigma_beta.reshape(-1).tolist(),
            "baseline": self.breslow_baseline.to_dict(),
            "log_partial_likelihood": self.log_partial_likelihood,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoxFit":
        beta = np.asarray(d["beta"], dtype=float)
        p = beta.shape[0]
        return cls(
            beta_hat=beta,
            sigma_beta=np.asarray(d["sigma_beta"], dtype=float).reshape(p, p),
            breslow_baseline=StepFunction.from_dict(d["baseline"]),
            log_partial_likelihood=float(d.get("log_partial_likelihood", np.nan)),
            iterations=int(d.get("iterations", 0)),
            converged=bool(d.get("converged", True)),
            covariate_names=tuple(d.get("covariate_names", ())),
        )


class _RiskSums:
    """Risk-set sums of ``w``, ``w Z`` and ``w Z Z'`` at the distinct event times.

    Subjects are bucketed between consecutive event times with a sparse
    matrix, so one pass costs O(n p^2) regardless of how many event times
    there are.
    """

    def __init__(self, cohort: Cohort):
        self.cohort = cohort
        mask = cohort.counted_events(1)
        if not mask.any():
            raise CoxFitError("no events of interest in the cohort")
        self.times, inv = np.unique(cohort.exit[mask], return_inverse=True)
        self.d = np.bincount(inv, minlength=self.times.size).astype(float)
        z = cohort.covariates
        self.z_event_sum = z[mask].sum(axis=0)
        # Subject i adds +1 to bucket k when times[k] <= exit_i < times[k+1] and
        # -1 when times[k] <= entry_i < times[k+1]; a reversed cumulative sum over
        # buckets then gives sums over {entry < t_k <= exit}.
        k = self.times.size
        bx = np.searchsorted(self.times, cohort.exit, side="right") - 1
        bl = np.searchsorted(self.times, cohort.entry, side="right") - 1
        rows = np.concatenate((bx, bl))
        cols = np.concatenate((np.arange(cohort.n), np.arange(cohort.n)))
        vals = np.concatenate((np.ones(cohort.n), -np.ones(cohort.n)))
        keep = rows >= 0
        self.bucket = sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])),
                                        shape=(k, cohort.n))
        self.zz = (z[:, :, None] * z[:, None, :]).reshape(cohort.n, -1)

    def _at(self, values: np.ndarray) -> np.ndarray:
        return np.cumsum(np.asarray(self.bucket @ values)[::-1], axis=0)[::-1]

    def evaluate(self, beta: np.ndarray, order: int = 2):
        z = self.cohort.covariates
        eta = z @ beta
        shift = float(eta.max())
        w = np.exp(eta - shift)
        s0 = self._at(w)
        if np.any(s0 <= 0):
            raise EmptyRiskSetError(float(self.times[np.flatnonzero(s0 <= 0)[0]]))
        out = {"shift": shift, "s0": s0, "eta_event_sum": float(beta @ self.z_event_sum)}
        if order >= 1:
            out["s1"] = self._at(w[:, None] * z)
        if order >= 2:
            p = z.shape[1]
            out["s2"] = self._at(w[:, None] * self.zz).reshape(-1, p, p)
        return out


def _loglik(rs: _RiskSums, sums: dict) -> float:
    return sums["eta_event_sum"] - float(rs.d @ (np.log(sums["s0"]) + sums["shift"]))


def _score_info(rs: _RiskSums, sums: dict) -> tuple[np.ndarray, np.ndarray]:
    zbar = sums["s1"] / sums["s0"][:, None]
    u = rs.z_event_sum - rs.d @ zbar
    m2 = sums["s2"] / sums["s0"][:, None, None] - zbar[:, :, None] * zbar[:, None, :]
    info = np.tensordot(rs.d, m2, axes=1)
    return u, 0.5 * (info + info.T)


def log_partial_likelihood(cohort: Cohort, beta) -> float:
    """Breslow log partial likelihood."""
    rs = _RiskSums(cohort)
    return _loglik(rs, rs.evaluate(np.asarray(beta, dtype=float), order=0))


def score_and_information(cohort: Cohort, beta) -> tuple[np.ndarray, np.ndarray]:
    """Score vector and observed information at ``beta`` (Breslow ties)."""
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != cohort.p:
        raise ValueError(f"beta has length {beta.shape[0]}, cohort has p={cohort.p}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    rs = _RiskSums(cohort)
    return _score_info(rs, rs.evaluate(beta))


def _breslow(rs: _RiskSums, sums: dict) -> StepFunction:
    # s0 is scaled by exp(-shift), so undo that for the jump d / sum_{risk} exp(beta'Z)
    jumps = rs.d / sums["s0"] * np.exp(-sums["shift"])
    return StepFunction(rs.times, np.cumsum(jumps), 0.0)


def _check_conditioning(info: np.ndarray) -> None:
    cond = np.linalg.cond(info) if info.size else np.inf
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularInformationError(
            f"information matrix is singular or ill-conditioned (cond={cond:.3g}); "
            "check for constant or collinear covariates")


def fit_cox(cohort: Cohort, init_beta=None, tol: float = 1e-8, max_iter: int = 50,
            max_halvings: int = 40) -> CoxFit:
    """Newton-Raphson maximization of the Breslow partial likelihood.

    ``max_iter=0`` evaluates everything at ``init_beta`` without moving,
    which makes the returned baseline a plain weighted Nelson-Aalen curve.
    """
    rs = _RiskSums(cohort)
    beta = np.zeros(cohort.p) if init_beta is None else np.asarray(init_beta, dtype=float).copy()
    if beta.shape != (cohort.p,):
        raise ValueError(f"init_beta must have length {cohort.p}")

    sums = rs.evaluate(beta)
    ll = _loglik(rs, sums)
    u, info = _score_info(rs, sums)
    trace = [ll]
    it = 0
    while np.max(np.abs(u)) >= tol and it < max_iter:
        _check_conditioning(info)
        step = np.linalg.solve(info, u)
        for _ in range(max_halvings):
            cand = beta + step
            cand_sums = rs.evaluate(cand)
            cand_ll = _loglik(rs, cand_sums)
            if np.isfinite(cand_ll) and cand_ll >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        else:
            raise ConvergenceError("step halving failed to improve the partial likelihood", beta)
        beta, sums, ll = cand, cand_sums, cand_ll
        u, info = _score_info(rs, sums)
        trace.append(ll)
        it += 1

    converged = bool(np.max(np.abs(u)) < tol)
    if max_iter > 0 and not converged:
        raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations", beta)
    if max_iter > 0:
        _check_conditioning(info)
        sigma = np.linalg.inv(info)
    else:
        try:
            _check_conditioning(info)
            sigma = np.linalg.inv(info)
        except SingularInformationError:
            sigma = np.full((cohort.p, cohort.p), np.nan)
    return CoxFit(
        beta_hat=beta,
        sigma_beta=0.5 * (sigma + sigma.T),
        breslow_baseline=_breslow(rs, sums),
        log_partial_likelihood=ll,
        iterations=it,
        converged=converged,
        covariate_names=cohort.covariate_names,
        trace=tuple(trace),
    )


def breslow_variance(cohort: Cohort, fit: CoxFit, times) -> np.ndarray:
    """Model-based variance of the Breslow cumulative baseline hazard.

    ``sum dN / S0^2 + h' Sigma_beta h`` with ``h(t) = sum_{u<=t} Zbar(u) dN(u) / S0(u)``.
    """
    rs = _RiskSums(cohort)
    sums = rs.evaluate(fit.beta_hat, order=1)
    s0 = sums["s0"] * np.exp(sums["shift"])
    zbar = sums["s1"] / sums["s0"][:, None]
    times = np.atleast_1d(np.asarray(times, dtype=float))
    k = np.searchsorted(rs.times, times, side="right")
    v1 = np.concatenate(([0.0], np.cumsum(rs.d / s0**2)))[k]
    h = np.vstack((np.zeros(cohort.p), np.cumsum(zbar * (rs.d / s0)[:, None], axis=0)))[k]
    return v1 + np.einsum("ti,ij,tj->t", h, fit.sigma_beta, h)
