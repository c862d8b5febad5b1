"""Empirical-likelihood weights under moment constraints.

The primal problem ``max sum log w_i`` subject to ``sum w_i = 1`` and
``sum w_i h(Z_i) = mu`` is solved through its Lagrange dual in ``gamma``:
``w_i = 1 / (n D_i)`` with ``D_i = 1 + gamma'(h_i - mu)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import ConvergenceError, InfeasibleConstraint
from .survival import Cohort

CONSTRAINT_TYPES = (
    "raw_moment",
    "second_moment",
    "conditional_moment",
    "conditional_second_moment",
    "indicator",
)

D_FLOOR = 1e-10


@dataclass(frozen=True)
class Constraint:
    """One moment function ``h_j(Z)``. Covariate indices are 1-based.

    ``indicator`` uses ``k``/``value`` only; the conditional kinds multiply
    ``Z_j`` (or ``Z_j^2``) by ``I(Z_k == value)``.
    """

    type: str
    j: int | None = None
    k: int | None = None
    value: float | None = None

    def __post_init__(self):
        if self.type not in CONSTRAINT_TYPES:
            raise ValueError(f"unknown constraint type {self.type!r}")
        needs_j = self.type != "indicator"
        needs_given = self.type.startswith("conditional") or self.type == "indicator"
        if needs_j and (self.j is None or self.j < 1):
            raise ValueError(f"{self.type} needs a 1-based covariate index j")
        if needs_given and (self.k is None or self.k < 1 or self.value is None):
            raise ValueError(f"{self.type} needs a 1-based index k and a value")

    def columns(self) -> tuple[int, ...]:
        return tuple(i for i in (self.j, self.k) if i is not None)

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        p = z.shape[1]
        if max(self.columns()) > p:
            raise IndexError(f"constraint {self.label()} references a covariate beyond p={p}")
        if self.type == "indicator":
            return (z[:, self.k - 1] == self.value).astype(float)
        col = z[:, self.j - 1]
        val = col**2 if "second" in self.type else col
        if self.type.startswith("conditional"):
            val = val * (z[:, self.k - 1] == self.value)
        return val.astype(float)

    def label(self, names: Sequence[str] | None = None) -> str:
        def nm(i):
            return names[i - 1] if names and i <= len(names) else f"z{i}"
        if self.type == "indicator":
            return f"I({nm(self.k)}=={self.value:g})"
        base = f"{nm(self.j)}^2" if "second" in self.type else nm(self.j)
        if self.type.startswith("conditional"):
            return f"{base}*I({nm(self.k)}=={self.value:g})"
        return base

    def to_dict(self) -> dict:
        d: dict = {"type": self.type}
        if self.j is not None:
            d["j"] = self.j
        if self.type == "indicator":
            d["k"], d["value"] = self.k, self.value
        elif self.k is not None:
            d["given"] = {"k": self.k, "value": self.value}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Constraint":
        given = d.get("given", {})
        return cls(
            type=d["type"],
            j=d.get("j"),
            k=given.get("k", d.get("k")),
            value=given.get("value", d.get("value")),
        )


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    items: tuple[Constraint, ...]
    targets: np.ndarray
    target_variances: np.ndarray | None = None
    target_covariance: np.ndarray | None = None
    m: int | None = None

    def __post_init__(self):
        items = tuple(c if isinstance(c, Constraint) else Constraint.from_dict(c) for c in self.items)
        q = len(items)
        if q == 0:
            raise ValueError("constraint spec needs at least one item")
        targets = np.asarray(self.targets, dtype=float).reshape(-1)
        if targets.shape[0] != q:
            raise ValueError(f"{q} constraint items but {targets.shape[0]} targets")
        var = (np.zeros(q) if self.target_variances is None
               else np.asarray(self.target_variances, dtype=float).reshape(-1))
        if var.shape[0] != q or np.any(var < 0):
            raise ValueError("target_variances must be q nonnegative values")
        cov = self.target_covariance
        if cov is not None:
            cov = np.asarray(cov, dtype=float)
            if cov.shape != (q, q):
                raise ValueError("target_covariance must be q x q")
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "target_variances", var)
        object.__setattr__(self, "target_covariance", cov)

    @property
    def q(self) -> int:
        return len(self.items)

    def sigma_mu(self, diag_approx: bool = False) -> np.ndarray:
        """Covariance of the target estimates (not scaled by n or m)."""
        if diag_approx or self.target_covariance is None:
            return np.diag(self.target_variances)
        return self.target_covariance

    def with_targets(self, targets, variances=None, covariance=None, m=None) -> "ConstraintSpec":
        return ConstraintSpec(self.items, targets,
                              self.target_variances if variances is None else variances,
                              covariance, self.m if m is None else m)

    def to_dict(self) -> dict:
        d = {
            "items": [c.to_dict() for c in self.items],
            "targets": self.targets.tolist(),
            "target_variances": self.target_variances.tolist(),
        }
        if self.target_covariance is not None:
            d["target_covariance"] = self.target_covariance.tolist()
        if self.m is not None:
            d["m"] = int(self.m)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ConstraintSpec":
        return cls(
            items=tuple(Constraint.from_dict(c) for c in d["items"]),
            targets=d["targets"],
            target_variances=d.get("target_variances"),
            target_covariance=d.get("target_covariance"),
            m=d.get("m"),
        )


def evaluate_constraints(cohort: Cohort | np.ndarray, spec: ConstraintSpec | Sequence[Constraint]
                         ) -> np.ndarray:
    """n x q matrix whose row i is ``h(Z_i)``."""
    z = cohort.covariates if isinstance(cohort, Cohort) else np.atleast_2d(np.asarray(cohort, float))
    items = spec.items if isinstance(spec, ConstraintSpec) else spec
    return np.column_stack([c.evaluate(z) for c in items])


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    direction: np.ndarray | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.feasible


@dataclass(frozen=True, eq=False)
class ELWeights:
    gamma_hat: np.ndarray
    weights: np.ndarray
    dual_value: float
    converged: bool
    iterations: int = 0
    warnings: tuple[str, ...] = field(default=())


def _probe_directions(g: np.ndarray, n_random: int, rng: np.random.Generator) -> np.ndarray:
    q = g.shape[1]
    eye = np.eye(q)
    rand = rng.standard_normal((n_random, q))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    _, _, vt = np.linalg.svd(g, full_matrices=False)
    return np.vstack((eye, -eye, rand, vt, -vt))


def check_feasibility(H, targets, strict: bool = False, n_random: int = 64,
                      seed: int = 0, rtol: float = 1e-12) -> Feasibility:
    """Is ``targets`` strictly inside the convex hull of the rows of ``H``?

    The default probe test projects ``h_i - mu`` on coordinate axes, random
    unit vectors and the right singular vectors and requires each projection
    to take both signs. ``strict=True`` replaces it with a rank check plus a
    linear program for a separating direction.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    mu = np.asarray(targets, dtype=float).reshape(-1)
    g = H - mu
    scale = max(float(np.abs(g).max()), 1.0)
    tol = rtol * scale
    if strict:
        return _lp_feasibility(g, tol)
    for d in _probe_directions(g, n_random, np.random.default_rng(seed)):
        proj = g @ d
        if proj.max() <= tol:
            return Feasibility(False, -d, "all rows lie on one side of a hyperplane through mu")
        if proj.min() >= -tol:
            return Feasibility(False, d, "all rows lie on one side of a hyperplane through mu")
    return Feasibility(True)


def _lp_feasibility(g: np.ndarray, tol: float) -> Feasibility:
    n, q = g.shape
    _, s, vt = np.linalg.svd(g, full_matrices=True)
    rank = int(np.sum(s > tol * max(n, q)))
    if rank < q:
        return Feasibility(False, vt[-1], "constraint rows do not span all q directions")
    # a direction d with G d >= 0 and not identically zero certifies infeasibility
    res = linprog(c=np.zeros(q), A_ub=-g, b_ub=np.zeros(n),
                  A_eq=g.sum(axis=0, keepdims=True), b_eq=[1.0],
                  bounds=[(None, None)] * q, method="highs")
    if res.status == 0:
        d = res.x / np.linalg.norm(res.x)
        return Feasibility(False, d, "linear program found a separating direction")
    return Feasibility(True)


def solve_el_dual(H, targets, tol: float = 1e-10, max_iter: int = 100,
                  feasibility: str | None = "probe") -> ELWeights:
    """Damped Newton on the concave dual ``sum log(1 + gamma'(h_i - mu))``.

    Parameters
    ----------
    H : (n, q) array
        Constraint rows.
    targets : (q,) array
    tol : float
        Convergence threshold on the max-abs mean dual gradient (columns
        are standardised internally, ``gamma`` is reported on the original
        scale).
    feasibility : {"probe", "strict", None}
        Up-front hull check. Infeasible targets raise
        :class:`InfeasibleConstraint` carrying the separating direction.
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    mu = np.asarray(targets, dtype=float).reshape(-1)
    n, q = H.shape
    if mu.shape[0] != q:
        raise ValueError(f"H has {q} columns but {mu.shape[0]} targets were given")
    if feasibility is not None:
        feas = check_feasibility(H, mu, strict=(feasibility == "strict"))
        if not feas:
            raise InfeasibleConstraint(
                f"targets are not interior to the convex hull of the constraint rows "
                f"({feas.reason}); direction {np.array2string(feas.direction, precision=4)}",
                feas.direction)

    g_raw = H - mu
    scale = g_raw.std(axis=0)
    scale = np.where(scale > 0, scale, np.maximum(np.abs(g_raw).max(axis=0), 1.0))
    g = g_raw / scale

    gamma = np.zeros(q)
    D = np.ones(n)
    obj = 0.0
    it = 0
    grad = g.mean(axis=0)
    while True:
        if np.max(np.abs(grad)) < tol:
            break
        if it >= max_iter:
            raise ConvergenceError(
                f"EL dual did not converge in {max_iter} iterations "
                f"(max |gradient| {np.max(np.abs(grad)):.3g})", gamma / scale)
        gd = g / D[:, None]
        hess = gd.T @ gd / n
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise InfeasibleConstraint("constraint rows are linearly dependent; "
                                       "the dual Hessian is singular") from None
        gs = g @ step
        # largest step keeping every D_i above the floor
        neg = gs < 0
        t = 1.0
        if neg.any():
            t = min(1.0, 0.99 * float(np.min((D[neg] - D_FLOOR) / -gs[neg])))
        slope = float(grad @ step)
        while True:
            D_new = D + t * gs
            if np.all(D_new >= D_FLOOR):
                obj_new = float(np.mean(np.log(D_new)))
                if obj_new >= obj + 1e-4 * t * slope or t < 1e-14:
                    break
            t *= 0.5
        gamma = gamma + t * step
        D = 1.0 + g @ gamma
        obj = float(np.mean(np.log(D)))
        grad = (g / D[:, None]).mean(axis=0)
        it += 1
        if not np.all(np.isfinite(gamma)):
            raise ConvergenceError("EL dual diverged", gamma / scale)

    w = 1.0 / (n * D)
    msgs = []
    if w.min() < 1e-6 / n:
        msg = (f"EL weights near the hull boundary: min weight {w.min():.3g} < 1e-6/n; "
               "variance estimates may be unreliable")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        msgs.append(msg)
    return ELWeights(gamma_hat=gamma / scale, weights=w / w.sum(), dual_value=n * obj,
                     converged=True, iterations=it, warnings=tuple(msgs))


def el_weights(cohort: Cohort, spec: ConstraintSpec, **kwargs) -> ELWeights:
    return solve_el_dual(evaluate_constraints(cohort, spec), spec.targets, **kwargs)
