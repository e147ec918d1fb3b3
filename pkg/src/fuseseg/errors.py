"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit 2, IO
problems exit 3 (plain OSError), numeric aborts exit 4.
"""


class FusesegError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(FusesegError):
    """A contract violation in user-supplied data or arguments."""


class DimensionError(ValidationError):
    """Array shapes or sizes do not line up."""


class ConfigurationError(ValidationError):
    """Inconsistent or out-of-range configuration values."""


class OrderingError(ValidationError):
    """Frame indices were supplied out of monotonic order."""


class EligibilityError(ValidationError):
    """A case does not qualify for the requested augmentation."""


class TraceParseError(ValidationError):
    """A serialized memory-bank trace could not be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class CheckpointVersionError(ValidationError):
    """Checkpoint file format or config does not match expectations."""


class NumericError(FusesegError):
    """Numerical failure (non-finite values where finite ones are required)."""


class NonFiniteError(NumericError):
    """An input tensor contains NaN or Inf entries."""


class TrainingAbort(NumericError):
    """Training hit a non-finite loss and stopped."""

    def __init__(self, message: str, checkpoint_path=None, diagnostic=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.diagnostic = diagnostic
