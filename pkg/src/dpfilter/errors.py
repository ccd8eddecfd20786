"""Exception hierarchy shared by all dpfilter modules."""

from __future__ import annotations


class DPFilterError(Exception):
    """Base class for every error raised by this package."""


class DomainError(DPFilterError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DimensionError(DPFilterError, ValueError):
    """Matrix or signal shapes are inconsistent."""


class StabilityError(DPFilterError):
    """A stable system was required but the system is not stable."""


class ConvergenceError(DPFilterError):
    """An iterative method hit its iteration cap."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConditioningError(DPFilterError):
    """A matrix that must be positive definite or well conditioned is not."""


class AlgebraError(DPFilterError):
    """Polynomial or transfer-function algebra degenerated."""


class UnsupportedError(DPFilterError):
    """The requested combination of options has no implementation."""


class InfeasibleError(DPFilterError):
    """An SDP or synthesis problem has no feasible point."""


class RecoveryError(DPFilterError):
    """Filter matrices could not be recovered from an LMI solution."""


class ConfigError(DPFilterError, ValueError):
    """An experiment configuration failed validation.

    ``path`` names the offending field, e.g. ``"budget.epsilon"``.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
