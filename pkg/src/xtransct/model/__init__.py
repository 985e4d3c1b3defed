"""Coordinate-query transformer that decodes voxel blocks from two projections."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import FULL_SCALE, ModelConfig, query_grid
from .network import XTransCT, assemble, disassemble, group_of

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "FULL_SCALE",
    "XTransCT",
    "assemble",
    "disassemble",
    "group_of",
    "load_checkpoint",
    "query_grid",
    "save_checkpoint",
]
