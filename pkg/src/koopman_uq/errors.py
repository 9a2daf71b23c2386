"""Exception hierarchy shared across the package.

The CLI maps each family onto an exit code, so new errors should subclass
one of the three leaf bases below rather than ``KoopmanUQError`` directly.
"""


class KoopmanUQError(Exception):
    """Base class for all package errors."""


class ValidationError(KoopmanUQError, ValueError):
    """Bad input shapes, values, configuration, or stale artifacts."""


class NumericalError(KoopmanUQError, ArithmeticError):
    """Integration blow-up, training divergence, instability, infeasibility."""


class ArtifactIOError(KoopmanUQError, OSError):
    """Missing or unreadable artifact files."""


class DomainError(ValidationError):
    """Non-finite or otherwise out-of-domain input."""


class IntegrationError(NumericalError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class TrainingError(NumericalError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class InstabilityError(NumericalError):
    """Raised when a Koopman matrix is not Schur stable."""


class SingularSystemError(NumericalError):
    """Normal equations singular even after Tikhonov regularization."""


class UnsupportedArchitectureError(ValidationError):
    pass


class StaleArtifactError(ValidationError):
    """An artifact's recorded input hash does not match the file on disk."""

    def __init__(self, message: str, stage: str):
        super().__init__(message)
        self.stage = stage
