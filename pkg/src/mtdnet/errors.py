"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Incompatible tensor extents."""


class SizeError(ValueError):
    """Element count does not fit the platform index type."""


class FormatError(ValueError):
    """A file on disk is malformed, truncated or of the wrong version."""


class ConfigurationError(ValueError):
    """A network or run configuration cannot be realised."""


class UndefinedMetricError(ArithmeticError):
    """A statistic is undefined for the given data (e.g. zero variance)."""
