class ValidationError(ValueError):
    """Rejected argument: bad shape, dimension, range, or configuration value."""


class FormatError(ValueError):
    """Malformed on-disk payload (sequence file, manifest, checkpoint, config)."""


class NumericError(ArithmeticError):
    """Non-finite values reached a computation that requires finite ones."""
