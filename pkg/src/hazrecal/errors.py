"""Exception hierarchy shared across the package."""

from __future__ import annotations

import numpy as np


class HazrecalError(Exception):
    """Base class for all package errors."""


class CohortError(HazrecalError, ValueError):
    """Malformed cohort data or an estimator precondition on the cohort."""


class EmptyRiskSetError(CohortError):
    def __init__(self, time: float):
        super().__init__(f"risk set is empty at event time {time:g}")
        self.time = time


class CoxFitError(HazrecalError):
    """Cox model could not be fitted."""


class SingularInformationError(CoxFitError):
    pass


class ConvergenceError(HazrecalError):
    """An iterative solver stopped without meeting its tolerance.

    ``last`` carries the final iterate so callers can inspect or restart.
    """

    def __init__(self, message: str, last=None):
        super().__init__(message)
        self.last = None if last is None else np.asarray(last, dtype=float)


class InfeasibleConstraint(HazrecalError):
    """The constraint targets are not interior to the convex hull of the rows.

    ``direction`` is a vector d with d'(h_i - mu) >= 0 for every row, i.e. a
    certificate that no positive weights can reproduce the targets.
    """

    def __init__(self, message: str, direction=None):
        super().__init__(message)
        self.direction = None if direction is None else np.asarray(direction, dtype=float)


class SimulationError(HazrecalError):
    pass


class InputError(HazrecalError, ValueError):
    """Unreadable or inconsistent user input (files, options)."""
