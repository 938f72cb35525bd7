"""Exception hierarchy shared across the package."""


class SegcalError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(SegcalError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class InvalidValueError(SegcalError, ValueError):
    """A tensor or payload contains values outside its contract."""


class ConfigError(SegcalError, ValueError):
    """A configuration object violates one of its invariants."""


class TapeError(SegcalError, RuntimeError):
    """Misuse of the differentiation tape (mixed tapes, reuse after backward)."""


class FormatError(SegcalError, ValueError):
    """Base class for binary file-format failures."""


class MagicMismatchError(FormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(FormatError):
    """File carries a format version this build cannot read."""


class TruncationError(FormatError):
    """File ended before the declared payload was complete."""


class PayloadRangeError(FormatError):
    """Payload values fall outside their documented range."""


class ConfigMismatchError(FormatError):
    """A parameter file was written under a different model configuration."""


class TrainingDivergedError(SegcalError, RuntimeError):
    """Training produced a non-finite loss or gradient."""
