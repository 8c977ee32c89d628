"""Finite-sample concentration machinery for contractive stochastic approximation.

Modules: ``core`` (norms, stepsizes, seeds), ``moreau`` (smoothed Lyapunov
envelope), ``engine`` (ensembles), ``bounds`` (constants and curves),
``linear_sa``, ``rl``, ``hard_example``, ``verify`` (statistical audits) and
``cli``.
"""

__version__ = "0.1.0"

from .bounds import (
    AddLedger,
    BoundCurve,
    ConditionError,
    MultLedger,
    add_bound_curve,
    add_ledger_for,
    condition1_min_h,
    condition2_min_h,
    mult_bound_curve,
    mult_ledger_for,
    validate_conditions,
    worst_case_bound,
)
from .core import NormSpec, SeedSpec, StepSchedule, norm_eval
from .engine import NoiseModel, SAProblem, affine_gaussian_problem, audit_assumptions, run_ensemble
from .moreau import MoreauConfig, moreau_eval, q_learning_config

__all__ = [
    "AddLedger",
    "BoundCurve",
    "ConditionError",
    "MoreauConfig",
    "MultLedger",
    "NoiseModel",
    "NormSpec",
    "SAProblem",
    "SeedSpec",
    "StepSchedule",
    "add_bound_curve",
    "add_ledger_for",
    "affine_gaussian_problem",
    "audit_assumptions",
    "condition1_min_h",
    "condition2_min_h",
    "moreau_eval",
    "mult_bound_curve",
    "mult_ledger_for",
    "norm_eval",
    "q_learning_config",
    "run_ensemble",
    "validate_conditions",
    "worst_case_bound",
]
