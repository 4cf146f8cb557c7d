"""Robustness augmentations for voxel grids.

Every stochastic op takes a ``numpy.random.Generator``; the same seed and call
sequence reproduce the same output.
"""
from __future__ import annotations

import math
from typing import Literal, Sequence

import numpy as np

from .geo import CameraPose
from .grid import SparseVoxelGrid, canonicalize, closing, morph, simplify

JaggedMode = Literal["symmetric", "lower"]


def jagged_perturb(g: SparseVoxelGrid, rng: np.random.Generator,
                   mode: JaggedMode = "symmetric") -> SparseVoxelGrid:
    """Shift every voxel by a random offset per axis and drop collisions.

    ``mode="symmetric"`` draws offsets from {-1, 0, 1}; ``"lower"`` from
    {-1, 0} (an exclusive upper bound). Features follow their voxel; on a
    collision the earlier voxel in canonical order keeps its row. Bounded grids
    clamp shifted coordinates into ``[0, L)``.
    """
    if mode == "symmetric":
        hi = 2
    elif mode == "lower":
        hi = 1
    else:
        raise ValueError(f"unknown jagged mode {mode!r}")
    offsets = rng.integers(-1, hi, size=(len(g), 3))
    coords = g.coords + offsets
    if g.bounded:
        coords = np.clip(coords, 0, g.resolution - 1)
    return canonicalize(coords, g.features, resolution=g.resolution, voxel_size=g.voxel_size,
                        bounded=g.bounded)


def roughen(latents: SparseVoxelGrid, d_l: int = 3, s_l: int = 2) -> SparseVoxelGrid:
    """Dilate by ``d_l`` then complete ``s_l``-aligned blocks.

    Voxels of the input keep their feature rows; voxels created here get zero
    rows.
    """
    if d_l < 1 or d_l % 2 == 0:
        raise ValueError("d_l must be odd and >= 1")
    if s_l < 2:
        raise ValueError("s_l must be >= 2")
    rough = simplify(morph(latents, d_l, "dilate"), s_l)
    if latents.features is None:
        return rough
    feats = np.zeros((len(rough), latents.channels), dtype=latents.features.dtype)
    rows = latents.index_of(rough.coords)
    hit = rows >= 0
    feats[hit] = latents.features[rows[hit]]
    return rough.with_features(feats)


def principal_xy_directions(normals: np.ndarray) -> np.ndarray:
    """Eigenvectors (rows) of the covariance of XY-projected normals, major first."""
    xy = np.asarray(normals, dtype=np.float64)[:, :2]
    if xy.shape[0] < 2:
        cov = np.zeros((2, 2))
    else:
        cov = np.cov(xy, rowvar=False)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, ::-1].T


def normal_drop(cond: SparseVoxelGrid, sigma_s: float, rng: np.random.Generator,
                closing_k: int = 3, noise_deg: float = 5.0,
                normal_channels: slice = slice(-3, None),
                direction: Sequence[float] | None = None) -> SparseVoxelGrid:
    """Drop condition voxels whose normals face one dominant horizontal direction.

    The direction is one of the two principal axes of the XY normal
    components, picked uniformly with a random sign and rotated by uniform
    noise in ``[-noise_deg, noise_deg]`` degrees (``direction`` overrides the
    pick; the noise is still applied). Voxels with cosine similarity above
    ``sigma_s`` are marked, the marked set is closed with a ``closing_k`` cube,
    and closed voxels that face the direction (cosine > 0) are removed, so
    voxels with purely vertical normals always survive.
    """
    if not len(cond):
        return cond
    normals = np.asarray(cond.features[:, normal_channels], dtype=np.float64)
    if normals.shape[1] != 3:
        raise ValueError("normal_channels must select three channels")
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-length normal")
    normals = normals / norms[:, None]

    if direction is None:
        axes = principal_xy_directions(normals)
        pick = axes[rng.integers(0, 2)]
        sign = 1.0 if rng.integers(0, 2) else -1.0
        d2 = sign * pick
    else:
        d2 = np.asarray(direction, dtype=np.float64)[:2]
    angle = math.radians(rng.uniform(-noise_deg, noise_deg)) if noise_deg > 0 else 0.0
    c, s = math.cos(angle), math.sin(angle)
    d2 = np.array([c * d2[0] - s * d2[1], s * d2[0] + c * d2[1]])
    d = np.array([d2[0], d2[1], 0.0])
    d /= np.linalg.norm(d)

    cos = normals @ d
    marked = SparseVoxelGrid(cond.coords[cos > sigma_s], None, cond.resolution, cond.voxel_size, cond.bounded)
    if closing_k > 1 and len(marked):
        marked = closing(marked, closing_k)
    drop = marked.contains(cond.coords) & (cos > 0)
    keep = ~drop
    return SparseVoxelGrid(cond.coords[keep], cond.features[keep], cond.resolution,
                           cond.voxel_size, cond.bounded)


def _mirror_pose(pose: CameraPose, axis: int, plane: float) -> CameraPose:
    m = np.ones(3)
    m[axis] = -1.0
    position = pose.position * m
    position[axis] += 2.0 * plane
    # reflect the world, then flip the camera's x so the frame stays right-handed
    rotation = (m[:, None] * pose.rotation) * np.array([-1.0, 1.0, 1.0])[None, :]
    return CameraPose(rotation, position)


def flip_with_pose(g: SparseVoxelGrid, axis: int, poses: Sequence[CameraPose] = ()
                   ) -> tuple[SparseVoxelGrid, list[CameraPose]]:
    """Mirror a bounded grid along ``axis`` and reflect the cameras with it.

    Voxel ``c`` maps to ``L - 1 - c``; cameras are mirrored about the world
    plane through the grid center and their image x axis is flipped, so a
    voxel seen at pixel ``u`` is seen at ``2 * cx - u`` after the flip.
    """
    if not g.bounded:
        raise ValueError("flip needs a bounded grid")
    if axis not in (0, 1, 2):
        raise ValueError("axis must be 0, 1 or 2")
    coords = g.coords.copy()
    coords[:, axis] = g.resolution - 1 - coords[:, axis]
    out = canonicalize(coords, g.features, resolution=g.resolution, voxel_size=g.voxel_size, bounded=True)
    plane = g.resolution * g.voxel_size / 2.0
    return out, [_mirror_pose(p, axis, plane) for p in poses]


def crop_with_pose(g: SparseVoxelGrid, box: Sequence[int], poses: Sequence[CameraPose] = ()
                   ) -> tuple[SparseVoxelGrid, list[CameraPose]]:
    """Keep voxels in ``box = (x0, y0, z0, x1, y1, z1)`` (max exclusive), moved to the origin."""
    lo = np.asarray(box[:3], dtype=np.int64)
    hi = np.asarray(box[3:], dtype=np.int64)
    if np.any(hi <= lo):
        raise ValueError("empty crop box")
    if g.bounded and (np.any(lo < 0) or np.any(hi > g.resolution)):
        raise ValueError("crop box outside the grid")
    inside = np.all((g.coords >= lo) & (g.coords < hi), axis=1)
    coords = g.coords[inside] - lo
    feats = None if g.features is None else g.features[inside]
    size = int(np.max(hi - lo))
    out = SparseVoxelGrid(coords, feats, size, g.voxel_size, g.bounded)
    shift = lo * g.voxel_size
    return out, [CameraPose(p.rotation, p.position - shift) for p in poses]


def random_zero_condition(g: SparseVoxelGrid, rng: np.random.Generator, n: int = 10000,
                          channels: int | None = None) -> SparseVoxelGrid:
    """Empty-condition stand-in: ``min(n, |g|)`` random voxels with zero features."""
    k = min(n, len(g))
    pick = np.sort(rng.choice(len(g), size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    c = channels if channels is not None else max(g.channels, 1)
    feats = np.zeros((k, c), dtype=np.float32)
    return SparseVoxelGrid(g.coords[pick], feats, g.resolution, g.voxel_size, g.bounded)
