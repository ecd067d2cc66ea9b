"""Desk-scale numerical laboratory for a stochastically forced 2D Boussinesq system.

The package verifies, at small spectral resolutions, the operator identities,
variational calculus, bracket-spanning algebra, and ergodicity diagnostics of
a vorticity-temperature flow on the torus driven by a degenerate pure-jump
forcing (Brownian increments evaluated along a subordinator clock, pushed
into a handful of temperature modes).
"""

from .config import ConfigError, RunConfig, load_config, parse_config, save_config
from .noise import NoiseModel, SubordinatorPath, SubordinatorSpec
from .spectral import (
    PhysicsParams,
    SpectralState,
    apply_A,
    apply_G,
    biot_savart,
    drift_F,
    nonlinear_B,
    project_PN,
    project_QN,
    sigma_state,
    psi_state,
    state_dot,
    state_zeros,
    weighted_norm,
)
from .stepping import Stepper, StepScheme, Trajectory, run_with_noise, simulate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "NoiseModel",
    "PhysicsParams",
    "RunConfig",
    "SpectralState",
    "Stepper",
    "StepScheme",
    "SubordinatorPath",
    "SubordinatorSpec",
    "Trajectory",
    "apply_A",
    "apply_G",
    "biot_savart",
    "drift_F",
    "load_config",
    "nonlinear_B",
    "parse_config",
    "project_PN",
    "project_QN",
    "psi_state",
    "run_with_noise",
    "save_config",
    "sigma_state",
    "simulate",
    "state_dot",
    "state_zeros",
    "weighted_norm",
    "__version__",
]
