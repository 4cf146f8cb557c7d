"""Pseudo-sparse to sparse upsampling.

A sparse pixel shuffle turns every voxel into its ``r**3`` children (the
*pseudo-sparse* candidates), trading feature channels for resolution. A
classifier then decides which candidates survive. The helpers here produce the
candidates, the binary training targets, and apply the pruning and the two
generation-time thresholds.

Channel layout: the child at offset ``(dx, dy, dz)`` receives channel block
``dx * r**2 + dy * r + dz`` of its parent's feature row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import SparseVoxelGrid, canonicalize, child_offsets, dense_coords, pack_keys

LATENT_CHANNELS = 32


@dataclass(frozen=True, eq=False)
class PseudoSparseGrid:
    """Upsampled candidate voxels and, for each, the row of its parent."""

    grid: SparseVoxelGrid
    parent: np.ndarray
    factor: int = 2

    def __len__(self) -> int:
        return len(self.grid)

    @property
    def coords(self) -> np.ndarray:
        return self.grid.coords


def sparse_pixel_shuffle(g: SparseVoxelGrid, r: int = 2) -> PseudoSparseGrid:
    """Spawn ``r**3`` children per voxel, splitting features into channel blocks."""
    blocks = r ** 3
    c = g.channels
    if c % blocks:
        raise ValueError(f"channel count {c} not divisible by {blocks}")
    cc = c // blocks
    n = len(g)
    offsets = child_offsets(r)
    coords = (g.coords[:, None, :] * r + offsets[None]).reshape(-1, 3)
    parent = np.repeat(np.arange(n, dtype=np.int64), blocks)
    feats = None
    if g.features is not None:
        # offsets enumerate (dx, dy, dz) with dz fastest, matching block order
        feats = g.features.reshape(n * blocks, cc)
    order = np.argsort(pack_keys(coords), kind="stable")
    out = SparseVoxelGrid(coords[order], None if feats is None else feats[order],
                          g.resolution * r, g.voxel_size / r, g.bounded)
    return PseudoSparseGrid(out, parent[order], r)


def sparse_pixel_unshuffle(pseudo: PseudoSparseGrid, parents: SparseVoxelGrid | None = None) -> SparseVoxelGrid:
    """Inverse of :func:`sparse_pixel_shuffle` for complete candidate sets."""
    r = pseudo.factor
    blocks = r ** 3
    g = pseudo.grid
    parent_coords = np.floor_divide(g.coords, r)
    if parents is None:
        parents = canonicalize(parent_coords, resolution=max(1, g.resolution // r),
                               voxel_size=g.voxel_size * r, bounded=g.bounded)
    n = len(parents)
    if len(g) != n * blocks:
        raise ValueError("candidate set is not complete (need r**3 children per parent)")
    rows = parents.index_of(parent_coords)
    if np.any(rows < 0):
        raise ValueError("candidate without a parent")
    local = g.coords - parent_coords * r
    block = local[:, 0] * r * r + local[:, 1] * r + local[:, 2]
    feats = None
    if g.features is not None:
        cc = g.channels
        feats = np.zeros((n, blocks, cc), dtype=g.features.dtype)
        feats[rows, block] = g.features
        feats = feats.reshape(n, blocks * cc)
    return SparseVoxelGrid(parents.coords, feats, parents.resolution, parents.voxel_size, parents.bounded)


def pseudo_label_targets(pseudo: PseudoSparseGrid | SparseVoxelGrid, gt: SparseVoxelGrid) -> np.ndarray:
    """1 where a candidate is a ground-truth voxel, else 0."""
    grid = pseudo.grid if isinstance(pseudo, PseudoSparseGrid) else pseudo
    return gt.contains(grid.coords).astype(np.uint8)


def prune_by_logits(pseudo: PseudoSparseGrid | SparseVoxelGrid, logits, threshold: float = 0.0) -> SparseVoxelGrid:
    """Keep candidates whose logit is strictly above ``threshold``."""
    grid = pseudo.grid if isinstance(pseudo, PseudoSparseGrid) else pseudo
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if logits.shape[0] != len(grid):
        raise ValueError(f"{logits.shape[0]} logits for {len(grid)} candidates")
    keep = logits > threshold
    feats = None if grid.features is None else grid.features[keep]
    return SparseVoxelGrid(grid.coords[keep], feats, grid.resolution, grid.voxel_size, grid.bounded)


def coarse_threshold(values, side: int | None = None, *, voxel_size: float = 1.0) -> SparseVoxelGrid:
    """Occupied cells of a dense ``side**3`` field: strictly positive values.

    ``values`` is in raster order with z fastest, then y, then x.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if side is None:
        side = int(round(values.size ** (1 / 3)))
    if values.size != side ** 3:
        raise ValueError(f"expected {side ** 3} values, got {values.size}")
    coords = dense_coords(side)[values > 0]
    return SparseVoxelGrid(coords, None, side, voxel_size, True)


def _require_latent(latents: SparseVoxelGrid) -> None:
    if latents.channels != LATENT_CHANNELS:
        raise ValueError(f"latent grids carry {LATENT_CHANNELS} channels, got {latents.channels}")


def latent_magnitude_filter(latents: SparseVoxelGrid, tau: float = 0.3, frac: float = 0.5) -> SparseVoxelGrid:
    """Keep voxels where strictly more than ``frac`` of channels exceed ``tau``."""
    _require_latent(latents)
    above = np.count_nonzero(latents.features > tau, axis=1)
    keep = above > frac * latents.channels
    return SparseVoxelGrid(latents.coords[keep], latents.features[keep], latents.resolution,
                           latents.voxel_size, latents.bounded)


def zero_invalid_features(latents: SparseVoxelGrid, valid: SparseVoxelGrid) -> SparseVoxelGrid:
    """Zero the feature rows of voxels outside ``valid``; coordinates unchanged."""
    _require_latent(latents)
    mask = valid.contains(latents.coords)
    feats = np.where(mask[:, None], latents.features, 0).astype(latents.features.dtype)
    return latents.with_features(feats)
