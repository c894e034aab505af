"""Exception types shared across the package."""


class SafepenError(Exception):
    """Base class for package errors."""


class IllConditionedError(SafepenError):
    """A Gram matrix could not be factorized even after the jitter ladder."""


class DegenerateLengthScaleError(SafepenError):
    """Moment matching hit a singular scale matrix (length scales too small)."""


class PropagationError(SafepenError):
    """Belief propagation produced a covariance that is not PSD within tolerance.

    Attributes:
        step: index of the rollout step at which propagation broke down,
            or None when raised outside a rollout.
    """

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ConfigError(SafepenError):
    """An experiment or environment config failed schema validation."""
