"""Shared exception types.

Exit-code mapping for the CLI: ConfigError -> 2, NumericFailure -> 3.
"""


class DimensionError(ValueError):
    """Shapes or extents of two operands do not line up."""


class RangeError(ValueError):
    """A scalar argument is outside its documented domain."""


class ConfigError(ValueError):
    """A run configuration is internally inconsistent or unusable."""


class NumericFailure(RuntimeError):
    """A non-finite value appeared where the contract requires finiteness."""
