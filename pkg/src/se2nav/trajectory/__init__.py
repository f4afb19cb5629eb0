"""Piecewise-quintic trajectory optimization over SE(2) with terrain-aware constraints."""

from .alm import (AlmSettings, AuditReport, NonConvergenceError, TrajectorySolution, audit_constraints,
                  coeffs_from_vars, constraints_at_samples, objective_and_grad, phr_alm_solve)
from .fields import AnalyticFieldProvider, GridFieldProvider, SmoothRiskField
from .kernels import CONSTRAINT_NAMES
from .minco import IllConditionedError, banded_solve, section_coefficients
from .polynomial import PiecewiseQuintic
from .problem import BoundaryState, DecisionVars, Evaluator, TrajectoryProblem

__all__ = [
    "AlmSettings", "AnalyticFieldProvider", "AuditReport", "BoundaryState", "CONSTRAINT_NAMES",
    "DecisionVars", "Evaluator", "GridFieldProvider", "IllConditionedError", "NonConvergenceError",
    "PiecewiseQuintic", "SmoothRiskField", "TrajectoryProblem", "TrajectorySolution",
    "audit_constraints", "banded_solve", "coeffs_from_vars", "constraints_at_samples",
    "objective_and_grad", "phr_alm_solve", "section_coefficients",
]
