"""Sparse voxel tools for aerial scene generation pipelines."""
from __future__ import annotations

__version__ = "0.1.0"

from .grid import (SparseVoxelGrid, canonicalize, closing, downsample_coords, iou, morph,
                   occupancy_accuracy, set_op, simplify, upsample_coords)
from .svox import SvoxError, read_svox, write_svox

__all__ = [
    "SparseVoxelGrid", "canonicalize", "closing", "downsample_coords", "iou", "morph",
    "occupancy_accuracy", "set_op", "simplify", "upsample_coords",
    "SvoxError", "read_svox", "write_svox",
]
