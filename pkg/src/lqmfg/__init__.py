"""Decentralized strategies for linear-quadratic mean-field games.

Solver library and CLI for LQ mean-field games with control-average coupling
and partially observed states: Riccati/offset ODEs, the consistency-condition
system for the control-average limit, Kalman–Bucy filtering in innovation
form, Monte Carlo population simulation, and empirical ε-Nash diagnostics.
"""

from . import errors
from .cash import cash_default_params, cash_scenario, run_cash_experiment
from .consistency import (
    CCSolution,
    cc_residual,
    solve_cc_auto,
    solve_cc_decoupled,
    solve_cc_fixed_point,
)
from .model import (
    AffineExtension,
    Coefficient,
    ModelParams,
    TimeGrid,
    ValidatedModel,
    dump_model_dict,
    load_model_dict,
    scalar_model,
    validate,
)
from .nash import (
    Perturbation,
    ScalingReport,
    best_response_deviation,
    scaling_sweep,
    stationarity_check,
)
from .population import PopulationResult, SimConfig, simulate_population
from .riccati import MatrixPath, VectorPath, check_monotonicity, solve_P, solve_Pi
from .serialize import RunManifest

__all__ = [
    "AffineExtension",
    "CCSolution",
    "Coefficient",
    "MatrixPath",
    "ModelParams",
    "Perturbation",
    "PopulationResult",
    "RunManifest",
    "ScalingReport",
    "SimConfig",
    "TimeGrid",
    "ValidatedModel",
    "VectorPath",
    "best_response_deviation",
    "cash_default_params",
    "cash_scenario",
    "cc_residual",
    "check_monotonicity",
    "dump_model_dict",
    "errors",
    "load_model_dict",
    "run_cash_experiment",
    "scalar_model",
    "scaling_sweep",
    "simulate_population",
    "solve_P",
    "solve_Pi",
    "solve_cc_auto",
    "solve_cc_decoupled",
    "solve_cc_fixed_point",
    "stationarity_check",
    "validate",
]

__version__ = "0.1.0"
