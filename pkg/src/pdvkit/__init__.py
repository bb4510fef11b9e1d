"""Simulation and verification toolkit for 2- and 4-factor path-dependent volatility models."""

from .engine import PathRecord, simulate_path, step_euler, step_exponential
from .mc import (
    check_martingale,
    check_moment_bound,
    check_nonexplosion,
    check_positivity,
    check_positivity_failure_4f,
    check_tilted_drift_bound,
    convergence_study,
    run_ensemble,
)
from .model import (
    GL_AFFINE_SQRT,
    REFERENCE_2F,
    REFERENCE_4F,
    Pdv2Params,
    Pdv4Params,
    SimConfig,
    State2,
    State4,
    VolFunctional,
    default_initial_state,
    validate_params,
)
from .noise import NoiseStream
from .theory import (
    counterexample_4f,
    gronwall_constants_2f,
    gronwall_constants_4f,
    growth_constants,
    positivity_condition,
    tilted_bound_constants,
)

__version__ = "0.1.0"

__all__ = [
    "GL_AFFINE_SQRT",
    "NoiseStream",
    "PathRecord",
    "Pdv2Params",
    "Pdv4Params",
    "SimConfig",
    "State2",
    "State4",
    "REFERENCE_2F",
    "REFERENCE_4F",
    "VolFunctional",
    "check_martingale",
    "check_moment_bound",
    "check_nonexplosion",
    "check_positivity",
    "check_positivity_failure_4f",
    "check_tilted_drift_bound",
    "convergence_study",
    "counterexample_4f",
    "default_initial_state",
    "gronwall_constants_2f",
    "gronwall_constants_4f",
    "growth_constants",
    "positivity_condition",
    "run_ensemble",
    "simulate_path",
    "step_euler",
    "step_exponential",
    "tilted_bound_constants",
    "validate_params",
]
