"""Recalibration of Cox-model baseline hazards to a target population.

The source cohort supplies individual data and a fitted Cox model; the
target contributes only summaries (disease-free probabilities and covariate
moments). Empirical-likelihood weights reconcile the covariate
distributions before the baseline hazard is re-estimated.
"""

from .absrisk import AbsoluteRiskInput, absolute_risk, absolute_risk_variance, predict_batch
from .cox import CoxFit, breslow_variance, fit_cox
from .el import Constraint, ConstraintSpec, check_feasibility, el_weights, solve_el_dual
from .errors import (CohortError, ConvergenceError, CoxFitError, EmptyRiskSetError,
                     HazrecalError, InfeasibleConstraint, InputError, SimulationError,
                     SingularInformationError)
from .recalib import (RecalResult, TargetSummary, influence_covariance, recalibrate,
                      solve_unweighted, solve_weighted)
from .survival import Cohort, StepFunction, SubjectRecord, kaplan_meier, nelson_aalen

__version__ = "0.1.0"

__all__ = [
    "AbsoluteRiskInput", "Cohort", "CohortError", "Constraint", "ConstraintSpec",
    "ConvergenceError", "CoxFit", "CoxFitError", "EmptyRiskSetError", "HazrecalError",
    "InfeasibleConstraint", "InputError", "RecalResult", "SimulationError",
    "SingularInformationError", "StepFunction", "SubjectRecord", "TargetSummary",
    "absolute_risk", "absolute_risk_variance", "breslow_variance", "check_feasibility",
    "el_weights", "fit_cox", "influence_covariance", "kaplan_meier", "nelson_aalen",
    "predict_batch", "recalibrate", "solve_el_dual", "solve_unweighted", "solve_weighted",
]
