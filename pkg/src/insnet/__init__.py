"""Insertion-based sequence modelling with insertion-stable relative offsets."""

from .model import InsNet, InsNetConfig
from .position import InsertionOrder, compress_offsets, oracle_offsets

__all__ = ["InsNet", "InsNetConfig", "InsertionOrder", "compress_offsets", "oracle_offsets"]
__version__ = "0.1.0"
