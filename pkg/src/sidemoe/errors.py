"""Exception types shared across the package."""


class SideMoEError(Exception):
    """Base class for all package errors."""


class ConfigError(SideMoEError, ValueError):
    """Invalid configuration value or key."""


class DimensionError(SideMoEError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(SideMoEError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class InvalidDistributionError(NumericError):
    """A probability normalization had no finite mass to normalize."""
