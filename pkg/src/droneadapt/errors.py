"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition (shape, range, finiteness)."""


class LengthError(ValidationError):
    """Signal is too short for the requested operation."""


class FormatError(ValueError):
    """A file (WAV, manifest, checkpoint) is malformed or unsupported."""


class ConfigMismatchError(FormatError):
    """A checkpoint was written for a different model configuration."""


class StateError(RuntimeError):
    """An operation was called out of order, e.g. backward before forward."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""
