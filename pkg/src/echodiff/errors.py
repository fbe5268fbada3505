"""Exception hierarchy shared across the package."""


class EchodiffError(Exception):
    """Base class for all package errors."""


class ConfigurationError(EchodiffError):
    """Invalid configuration value or combination (exit code 1 in the CLI)."""


class ContractViolation(EchodiffError):
    """A caller broke a documented precondition (shape mismatch, bad range)."""


class NumericsError(EchodiffError):
    """Non-finite values surfaced from a numerical computation."""


class DatasetError(EchodiffError):
    """Dataset layout or record validation failure."""


class CheckpointError(EchodiffError):
    """Checkpoint is unreadable, version-incompatible, or fails its integrity check."""


class TrainingError(EchodiffError):
    """Training aborted (non-finite loss, bad state)."""


class SamplingError(EchodiffError):
    """Sampling aborted; carries the diffusion step and sample provenance when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
