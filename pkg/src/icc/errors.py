"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class ConfigError(ValueError):
    """Invalid configuration (bad flag value, contradictory model flags)."""


class DataError(ValueError):
    """Unreadable or malformed input data (images, annotations, files)."""


class ZeroMassError(NumericError):
    """A density map required to carry positive mass has none."""
