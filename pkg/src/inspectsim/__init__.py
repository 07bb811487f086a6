"""Simulation and capacity analysis for systems of noisy expert inspectors."""

from .errors import InspectionError
from .model import (
    DerivedConstants,
    Instance,
    PolicyParams,
    animals_config,
    build_instance,
    derive_constants,
    kl_divergence,
    load_instance,
    policy_params,
)

__version__ = "0.1.0"

__all__ = [
    "DerivedConstants",
    "Instance",
    "InspectionError",
    "PolicyParams",
    "animals_config",
    "build_instance",
    "derive_constants",
    "kl_divergence",
    "load_instance",
    "policy_params",
]
