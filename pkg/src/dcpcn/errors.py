"""Exception types shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data errors 3,
numeric errors 4.
"""


class ConfigError(ValueError):
    """Invalid model or run configuration."""


class DataError(ValueError):
    """Malformed, missing or unusable input data."""


class NumericError(ArithmeticError):
    """Non-finite values or a failed numerical contract."""


class ShapeError(ValueError):
    """Tensor extents that do not line up for an operation."""
