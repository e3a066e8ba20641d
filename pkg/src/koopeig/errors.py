"""Exception types shared across the pipeline."""


class KoopeigError(Exception):
    """Base class for all package errors."""


class ConfigurationError(KoopeigError):
    """Invalid configuration or inconsistent inputs."""


class IntegrationOverflowError(KoopeigError):
    """Non-finite state produced during numerical integration."""

    def __init__(self, message, trajectory=None, step=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.step = step


class ConditioningError(KoopeigError):
    """A linear solve failed or produced non-finite values."""


class StateError(KoopeigError):
    """An operation was called before its prerequisites were computed."""


class DesignError(KoopeigError):
    """Controller or estimator design failed."""


class AllocationError(DesignError):
    """Steady-state target allocation is singular (setpoint unreachable)."""


class SolverError(KoopeigError):
    """Matrix-equation solver failed; carries a residual report."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InsufficientDataError(KoopeigError):
    """Not enough samples for a statistical estimate."""
