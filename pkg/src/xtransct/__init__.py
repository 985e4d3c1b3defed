"""Biplanar X-ray to CT reconstruction with a coordinate-query transformer, on NumPy."""

from .errors import ConfigurationError, ContractError, DimensionError, FormatError, NumericError, XTransCTError
from .volume import SegMask, Volume, load_mask, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "FormatError", "NumericError", "SegMask",
    "Volume", "XTransCTError", "load_mask", "load_volume", "save_volume",
]
