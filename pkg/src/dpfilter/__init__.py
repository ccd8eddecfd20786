"""Differentially private filtering of aggregated dynamic signals."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AlgebraError,
    ConditioningError,
    ConfigError,
    ConvergenceError,
    DimensionError,
    DomainError,
    DPFilterError,
    InfeasibleError,
    RecoveryError,
    StabilityError,
    UnsupportedError,
)
from .privacy import PrivacyBudget, kappa  # noqa: E402

__all__ = [
    "__version__",
    "AlgebraError",
    "ConditioningError",
    "ConfigError",
    "ConvergenceError",
    "DimensionError",
    "DomainError",
    "DPFilterError",
    "InfeasibleError",
    "RecoveryError",
    "StabilityError",
    "UnsupportedError",
    "PrivacyBudget",
    "kappa",
]
