"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array shapes are invalid or mutually incompatible."""


class FormatError(ValueError):
    """A VOL5 or CKPT byte stream is malformed."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class UsageError(RuntimeError):
    """An API was called out of order, e.g. backward with a foreign context."""
