"""Exception types shared across the package."""

from sklearn.exceptions import NotFittedError

__all__ = [
    "ConfigurationError",
    "DomainError",
    "InfeasibleError",
    "NotFittedError",
    "ScheduleError",
]


class ConfigurationError(ValueError):
    """Invalid parameters or configuration (bad box, T*lambda >= 1, ...)."""


class DomainError(ValueError):
    """Non-finite or otherwise inadmissible numerical input."""


class ScheduleError(ValueError):
    """Scheduling point outside the admissible envelope."""


class InfeasibleError(RuntimeError):
    """No admissible input keeps the predicted state inside the state box."""
