"""Repeated-interaction quantum thermodynamics at strong coupling."""

from .model import ConfigError, Instant, ScenarioConfig, before, validate_config
from .dynamics import Simulator, branch_all, sample_trajectories
from .thermo import Thermodynamics

__all__ = [
    "ConfigError", "Instant", "ScenarioConfig", "before", "validate_config",
    "Simulator", "branch_all", "sample_trajectories", "Thermodynamics",
]
