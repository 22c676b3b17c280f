"""Memory-efficient fine-tuning with a quantized frozen backbone and a sparse side network."""

from sidemoe.errors import ConfigError, DimensionError, InvalidDistributionError, NumericError, SideMoEError

__all__ = ["ConfigError", "DimensionError", "InvalidDistributionError", "NumericError", "SideMoEError"]
__version__ = "0.1.0"
