"""Absolute risk of the event of interest under a competing risk.

The risk over ``(t0, t1]`` is evaluated on the grid ``g_0 = t0 < g_1 < ...
< g_L`` of baseline-hazard knots inside the interval:

    sum_l dL0_l e^{b'z} exp[-(L0(g_{l-1}) - L0(t0)) e^{b'z} - (Lc(g_{l-1}) - Lc(t0))]

where ``dL0_l = L0(g_l) - L0(g_{l-1})``. The parameters of the delta method
are ``beta`` and the knot values of the two cumulative-hazard step
functions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .errors import HazrecalError
from .survival import StepFunction

Scheme = Literal["discrete", "piecewise_exponential"]


class CovarianceError(HazrecalError):
    """Assembled covariance is not positive semidefinite."""


@dataclass(frozen=True, eq=False)
class AbsoluteRiskInput:
    """Ingredients of one absolute-risk projection.

    ``cov_lambda`` and ``cov_beta_lambda`` are indexed by the knots of
    ``lambda0``; ``var_lambda_c`` by the knots of ``lambda_c``. ``beta_c``
    switches the competing hazard to ``Lc(t) exp(beta_c'z)``.
    """

    t0: float
    t1: float
    z: np.ndarray
    lambda0: StepFunction
    beta: np.ndarray
    lambda_c: StepFunction
    sigma_beta: np.ndarray | None = None
    cov_lambda: np.ndarray | None = None
    cov_beta_lambda: np.ndarray | None = None
    var_lambda_c: np.ndarray | None = None
    beta_c: np.ndarray | None = None
    sigma_beta_c: np.ndarray | None = None

    def __post_init__(self):
        if not self.t1 > self.t0:
            raise ValueError("need t1 > t0")
        z = np.asarray(self.z, dtype=float).reshape(-1)
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if z.shape != beta.shape:
            raise ValueError("z and beta must have the same length")
        p, L, Lc = beta.shape[0], self.lambda0.knots.size, self.lambda_c.knots.size
        for name, shape in (("sigma_beta", (p, p)), ("cov_lambda", (L, L)),
                            ("cov_beta_lambda", (p, L)), ("var_lambda_c", (Lc,))):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=float)
                if val.shape != shape:
                    raise ValueError(f"{name} must have shape {shape}, got {val.shape}")
                object.__setattr__(self, name, val)
        if self.beta_c is not None:
            bc = np.asarray(self.beta_c, dtype=float).reshape(-1)
            if bc.shape != z.shape:
                raise ValueError("beta_c must have the same length as z")
            object.__setattr__(self, "beta_c", bc)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "beta", beta)

    @property
    def n_params(self) -> int:
        extra = 0 if self.beta_c is None else self.beta_c.size
        return self.beta.size + self.lambda0.knots.size + self.lambda_c.knots.size + extra

    def parameter_vector(self) -> np.ndarray:
        parts = [self.beta, self.lambda0.values, self.lambda_c.values]
        if self.beta_c is not None:
            parts.append(self.beta_c)
        return np.concatenate(parts)

    def with_parameters(self, theta: np.ndarray) -> "AbsoluteRiskInput":
        p, L, Lc = self.beta.size, self.lambda0.knots.size, self.lambda_c.knots.size
        out = replace(
            self,
            beta=theta[:p],
            lambda0=StepFunction(self.lambda0.knots, theta[p:p + L], self.lambda0.pre_value),
            lambda_c=StepFunction(self.lambda_c.knots, theta[p + L:p + L + Lc],
                                  self.lambda_c.pre_value),
        )
        if self.beta_c is not None:
            out = replace(out, beta_c=theta[p + L + Lc:])
        return out

    def covariance(self) -> np.ndarray:
        """Block covariance of the parameter vector; missing blocks are zero."""
        p, L, Lc = self.beta.size, self.lambda0.knots.size, self.lambda_c.knots.size
        V = np.zeros((self.n_params, self.n_params))
        if self.sigma_beta is not None:
            V[:p, :p] = self.sigma_beta
        if self.cov_lambda is not None:
            V[p:p + L, p:p + L] = self.cov_lambda
        if self.cov_beta_lambda is not None:
            V[:p, p:p + L] = self.cov_beta_lambda
            V[p:p + L, :p] = self.cov_beta_lambda.T
        if self.var_lambda_c is not None:
            V[p + L:p + L + Lc, p + L:p + L + Lc] = np.diag(self.var_lambda_c)
        if self.beta_c is not None and self.sigma_beta_c is not None:
            V[p + L + Lc:, p + L + Lc:] = self.sigma_beta_c
        return V


def _grid(lambda0: StepFunction, t0: float, t1: float) -> np.ndarray:
    k = lambda0.knots
    return np.concatenate(([t0], k[(k > t0) & (k <= t1)]))


def _risk_core(eta: np.ndarray, eta_c: np.ndarray, L0: np.ndarray, Lc: np.ndarray,
               scheme: Scheme = "discrete"):
    """Vectorised risk for subjects (rows) given hazards at grid points (columns).

    ``L0`` and ``Lc`` have shape ``(L+1,)``: values at ``g_0..g_L``.
    """
    e = np.exp(eta)[:, None]
    ec = np.exp(eta_c)[:, None]
    dL = np.diff(L0)[None, :]
    A = (L0[:-1] - L0[0])[None, :]
    C = (Lc[:-1] - Lc[0])[None, :]
    E = np.exp(-A * e - C * ec)
    if scheme == "discrete":
        terms = e * dL * E
    elif scheme == "piecewise_exponential":
        a = e * dL
        b = ec * np.diff(Lc)[None, :]
        tot = a + b
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(tot > 0, a / tot * -np.expm1(-tot), 0.0)
        terms = E * frac
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return terms.sum(axis=1), e, ec, dL, A, C, E


def absolute_risk(inp: AbsoluteRiskInput, scheme: Scheme = "discrete") -> float:
    """Absolute risk in ``(t0, t1]`` for the profile ``inp.z``.

    ``scheme="discrete"`` is the left-endpoint sum over the knots of
    ``lambda0``. ``"piecewise_exponential"`` treats both hazards as constant
    between grid points, which is second-order accurate for smooth hazards.
    """
    g = _grid(inp.lambda0, inp.t0, inp.t1)
    if g.size < 2:
        warnings.warn("no baseline-hazard knots in (t0, t1]; risk is 0", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    eta = np.atleast_1d(inp.z @ inp.beta)
    eta_c = np.atleast_1d(0.0 if inp.beta_c is None else inp.z @ inp.beta_c)
    risk = _risk_core(eta, eta_c, np.asarray(inp.lambda0(g)), np.asarray(inp.lambda_c(g)),
                      scheme)[0][0]
    if risk < 0 and risk > -1e-12:
        risk = 0.0
    if risk > 1 and risk < 1 + 1e-12:
        risk = 1.0
    return float(risk)


def _analytic_gradients(Z: np.ndarray, inp: AbsoluteRiskInput, g: np.ndarray) -> np.ndarray:
    """Gradient of the discrete-sum risk for every row of ``Z`` (shape ``(k, n_params)``)."""
    p, L, Lc = inp.beta.size, inp.lambda0.knots.size, inp.lambda_c.knots.size
    eta = Z @ inp.beta
    eta_c = np.zeros(Z.shape[0]) if inp.beta_c is None else Z @ inp.beta_c
    L0g, Lcg = np.asarray(inp.lambda0(g)), np.asarray(inp.lambda_c(g))
    risk, e, ec, dL, A, C, E = _risk_core(eta, eta_c, L0g, Lcg)
    k, nl = Z.shape[0], g.size - 1
    T = e * dL * E                     # (k, nl) summands
    # partial derivatives with respect to the hazards at grid points g_0..g_L
    d0 = np.zeros((k, nl + 1))
    d0[:, 1:] += e * E                 # dL_l / d L0(g_l)
    d0[:, :-1] -= e * E                # dL_l / d L0(g_{l-1})
    d0[:, :-1] -= T * e                # exponent through L0(g_{l-1})
    d0[:, 0] += (T * e).sum(axis=1)    # exponent through -L0(t0)
    dc = np.zeros((k, nl + 1))
    dc[:, :-1] -= T * ec
    dc[:, 0] += (T * ec).sum(axis=1)

    grad = np.zeros((k, inp.n_params))
    deta = (T * (1.0 - A * e)).sum(axis=1)
    grad[:, :p] = deta[:, None] * Z
    # map grid points to knot indices; -1 is the constant pre_value
    i0 = inp.lambda0.index(g)
    ic = inp.lambda_c.index(g)
    for j in range(nl + 1):
        if i0[j] >= 0:
            grad[:, p + i0[j]] += d0[:, j]
        if ic[j] >= 0:
            grad[:, p + L + ic[j]] += dc[:, j]
    if inp.beta_c is not None:
        deta_c = -(T * C * ec).sum(axis=1)
        grad[:, p + L + Lc:] = deta_c[:, None] * Z
    return grad


def risk_gradient(inp: AbsoluteRiskInput, mode: str = "finite_difference",
                  scheme: Scheme = "discrete", rel_step: float = 1e-6) -> np.ndarray:
    """Gradient of the risk with respect to ``inp.parameter_vector()``."""
    if mode == "analytic":
        if scheme != "discrete":
            raise ValueError("analytic gradients are only available for the discrete scheme")
        g = _grid(inp.lambda0, inp.t0, inp.t1)
        if g.size < 2:
            return np.zeros(inp.n_params)
        return _analytic_gradients(inp.z[None, :], inp, g)[0]
    if mode != "finite_difference":
        raise ValueError(f"unknown gradient mode {mode!r}")
    theta = inp.parameter_vector()
    grad = np.empty_like(theta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for j in range(theta.size):
            h = rel_step * max(abs(theta[j]), 1.0)
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            grad[j] = (absolute_risk(inp.with_parameters(up), scheme)
                       - absolute_risk(inp.with_parameters(dn), scheme)) / (2 * h)
    return grad


def _quad_form(grad: np.ndarray, V: np.ndarray) -> float:
    var = float(grad @ V @ grad)
    if var < -1e-12:
        raise CovarianceError(f"delta-method variance is negative ({var:.3g}); "
                              "the supplied covariance blocks are inconsistent")
    return max(var, 0.0)


def absolute_risk_variance(inp: AbsoluteRiskInput, gradient_mode: str = "finite_difference",
                           scheme: Scheme = "discrete") -> float:
    """Delta-method variance ``f' V f`` of :func:`absolute_risk`.

    Cross-covariances between the event and competing hazards are zero.
    """
    return _quad_form(risk_gradient(inp, gradient_mode, scheme), inp.covariance())


def predict_batch(Z: np.ndarray, t0, t1, template: AbsoluteRiskInput,
                  with_variance: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Risk and delta-method SE for many profiles.

    Subjects sharing ``(t0, t1)`` are evaluated together with the analytic
    gradient of the discrete sum. ``template`` supplies hazards and
    covariance blocks; its ``z``, ``t0`` and ``t1`` are ignored.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    k = Z.shape[0]
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (k,))
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (k,))
    if np.any(t1 <= t0):
        raise ValueError("need t1 > t0 for every subject")
    risk = np.zeros(k)
    se = np.full(k, np.nan)
    V = template.covariance() if with_variance else None
    pairs = np.unique(np.column_stack((t0, t1)), axis=0)
    for a, b in pairs:
        rows = np.flatnonzero((t0 == a) & (t1 == b))
        g = _grid(template.lambda0, a, b)
        if g.size < 2:
            se[rows] = 0.0
            continue
        Zr = Z[rows]
        eta_c = np.zeros(rows.size) if template.beta_c is None else Zr @ template.beta_c
        r = _risk_core(Zr @ template.beta, eta_c, np.asarray(template.lambda0(g)),
                       np.asarray(template.lambda_c(g)))[0]
        risk[rows] = np.clip(r, 0.0, 1.0)
        if with_variance:
            G = _analytic_gradients(Zr, template, g)
            var = np.einsum("ki,ij,kj->k", G, V, G)
            if np.any(var < -1e-12):
                raise CovarianceError("delta-method variance is negative for some subjects")
            se[rows] = np.sqrt(np.maximum(var, 0.0))
    return risk, se


def linear_regrid(knots, values, grid, cov=None, cov_beta=None, pre_value: float = 0.0):
    """Linearly interpolate a cumulative hazard given at ``knots`` onto ``grid``.

    The point ``(0, pre_value)`` anchors the interpolation below the first
    knot; beyond the last knot the value is held constant. Because the map is
    linear, covariance matrices are carried along exactly.

    Returns ``(StepFunction, cov_grid, cov_beta_grid)``.
    """
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    xs = np.concatenate(([0.0], knots)) if knots[0] > 0 else knots
    offset = xs.size - knots.size
    # interpolation matrix W with W @ values + (anchor contribution) = grid values
    W = np.zeros((grid.size, knots.size))
    anchor = np.zeros(grid.size)
    for i, t in enumerate(grid):
        j = int(np.clip(np.searchsorted(xs, t, side="right") - 1, 0, xs.size - 1))
        if j >= xs.size - 1:
            W[i, knots.size - 1] = 1.0
            continue
        frac = (t - xs[j]) / (xs[j + 1] - xs[j])
        for col, wt in ((j - offset, 1 - frac), (j + 1 - offset, frac)):
            if col < 0:
                anchor[i] += wt * pre_value
            else:
                W[i, col] += wt
    out = StepFunction(grid, W @ values + anchor, pre_value)
    cov_g = None if cov is None else W @ np.asarray(cov, dtype=float) @ W.T
    cov_bg = None if cov_beta is None else np.asarray(cov_beta, dtype=float) @ W.T
    return out, cov_g, cov_bg
