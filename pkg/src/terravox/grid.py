"""Sparse voxel grids.

A :class:`SparseVoxelGrid` is an immutable set of integer voxel coordinates kept
in canonical order (ascending lexicographic ``(x, y, z)``), with an optional
feature row per voxel. Every operation in this module is pure and returns a
new canonical grid.

Coordinates are packed into a single ``int64`` key per voxel (21 bits per axis,
offset binary) so that sorting keys is the same as sorting coordinates
lexicographically. This bounds coordinates to ``[-2**20, 2**20)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1
COORD_MIN = -_OFFSET
COORD_MAX = _OFFSET - 1

SetOp = Literal["union", "intersection", "difference"]
MorphMode = Literal["dilate", "erode"]


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Pack ``(N, 3)`` integer coordinates into order-preserving int64 keys."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (c.min() < COORD_MIN or c.max() > COORD_MAX):
        raise ValueError(f"coordinates outside [{COORD_MIN}, {COORD_MAX}]")
    c = c + _OFFSET
    return (c[:, 0] << (2 * _BITS)) | (c[:, 1] << _BITS) | c[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.empty((keys.shape[0], 3), dtype=np.int64)
    out[:, 0] = (keys >> (2 * _BITS)) & _MASK
    out[:, 1] = (keys >> _BITS) & _MASK
    out[:, 2] = keys & _MASK
    out -= _OFFSET
    return out


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """Canonical sparse voxel grid.

    Attributes:
        coords: ``(N, 3)`` int64 voxel indices, unique and sorted by ``(x, y, z)``.
        features: optional ``(N, C)`` float array, row ``i`` belongs to ``coords[i]``.
        resolution: voxels per side ``L``. Bounded grids keep every coordinate in
            ``[0, L)``.
        voxel_size: meters per voxel.
        bounded: ``False`` for free-floating point clouds such as projected
            condition voxels, which may carry negative or out-of-range indices.

    Use :func:`canonicalize` to build a grid from arbitrary coordinates; the
    constructor only validates.
    """

    coords: np.ndarray
    features: np.ndarray | None = None
    resolution: int = 1
    voxel_size: float = 1.0
    bounded: bool = True

    def __post_init__(self) -> None:
        coords = np.ascontiguousarray(self.coords, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "coords", _frozen(coords))
        if self.features is not None:
            feats = np.ascontiguousarray(self.features)
            if feats.ndim == 1:
                feats = feats.reshape(-1, 1)
            if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
                raise ValueError(
                    f"features have {feats.shape[0] if feats.ndim else 0} rows, "
                    f"expected {coords.shape[0]}"
                )
            object.__setattr__(self, "features", _frozen(feats))
        if int(self.resolution) <= 0:
            raise ValueError("resolution must be positive")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "resolution", int(self.resolution))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

        keys = pack_keys(coords)
        if keys.size > 1 and not np.all(keys[1:] > keys[:-1]):
            raise ValueError("coords are not canonical (sorted and unique)")
        if self.bounded and coords.size:
            if coords.min() < 0 or coords.max() >= self.resolution:
                raise ValueError(f"coords outside [0, {self.resolution}) on a bounded grid")
        object.__setattr__(self, "_keys", _frozen(keys))

    @classmethod
    def empty(cls, resolution: int = 1, channels: int | None = None,
              voxel_size: float = 1.0, bounded: bool = True) -> "SparseVoxelGrid":
        feats = None if channels is None else np.zeros((0, channels), dtype=np.float32)
        return cls(np.zeros((0, 3), dtype=np.int64), feats, resolution, voxel_size, bounded)

    @property
    def keys(self) -> np.ndarray:
        return self._keys  # type: ignore[attr-defined]

    @property
    def channels(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __repr__(self) -> str:
        return (f"SparseVoxelGrid(n={len(self)}, C={self.channels}, L={self.resolution}, "
                f"voxel_size={self.voxel_size}, bounded={self.bounded})")

    def same_coords(self, other: "SparseVoxelGrid") -> bool:
        return np.array_equal(self.keys, other.keys)

    def with_features(self, features: np.ndarray | None) -> "SparseVoxelGrid":
        return SparseVoxelGrid(self.coords, features, self.resolution, self.voxel_size, self.bounded)

    def coords_only(self) -> "SparseVoxelGrid":
        return self.with_features(None)

    def like(self, coords: np.ndarray, features: np.ndarray | None = None,
             resolution: int | None = None) -> "SparseVoxelGrid":
        """Canonicalize new coordinates under this grid's metadata."""
        return canonicalize(coords, features,
                            resolution=self.resolution if resolution is None else resolution,
                            voxel_size=self.voxel_size, bounded=self.bounded)

    def contains(self, coords: np.ndarray) -> np.ndarray:
        """Boolean membership of each query coordinate."""
        q = pack_keys(coords)
        if not len(self):
            return np.zeros(q.shape[0], dtype=bool)
        idx = np.searchsorted(self.keys, q)
        idx = np.minimum(idx, len(self) - 1)
        return self.keys[idx] == q

    def index_of(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, ``-1`` where absent."""
        q = pack_keys(coords)
        if not len(self):
            return np.full(q.shape[0], -1, dtype=np.int64)
        idx = np.minimum(np.searchsorted(self.keys, q), len(self) - 1)
        return np.where(self.keys[idx] == q, idx, -1)


def canonicalize(coords, features=None, *, resolution: int = 1, voxel_size: float = 1.0,
                 bounded: bool = True) -> SparseVoxelGrid:
    """Sort coordinates lexicographically and drop duplicates.

    The first occurrence of a duplicated coordinate keeps its feature row.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if features is not None:
        features = np.asarray(features)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.shape[0] != coords.shape[0]:
            raise ValueError(
                f"feature rows ({features.shape[0]}) != coordinate count ({coords.shape[0]})")
    keys = pack_keys(coords)
    # np.unique returns the first index of each key in stable input order
    uniq, first = np.unique(keys, return_index=True)
    feats = None if features is None else features[first]
    return SparseVoxelGrid(unpack_keys(uniq), feats, resolution, voxel_size, bounded)


def _from_keys(keys: np.ndarray, like: SparseVoxelGrid) -> SparseVoxelGrid:
    return SparseVoxelGrid(unpack_keys(keys), None, like.resolution, like.voxel_size, like.bounded)


def set_op(a: SparseVoxelGrid, b: SparseVoxelGrid, op: SetOp) -> SparseVoxelGrid:
    """Coordinate-set union, intersection or difference; features are dropped."""
    if op == "union":
        keys = np.union1d(a.keys, b.keys)
    elif op == "intersection":
        keys = np.intersect1d(a.keys, b.keys, assume_unique=True)
    elif op == "difference":
        keys = np.setdiff1d(a.keys, b.keys, assume_unique=True)
    else:
        raise ValueError(f"unknown set op {op!r}")
    return _from_keys(keys, a)


def _clip_bounds(coords: np.ndarray, g: SparseVoxelGrid) -> np.ndarray:
    if not g.bounded:
        return coords
    keep = np.all((coords >= 0) & (coords < g.resolution), axis=1)
    return coords[keep]


def _dense_box(coords: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    lo = coords.min(axis=0) - r
    shape = coords.max(axis=0) + r + 1 - lo
    return lo, shape


def _morph_dense(g: SparseVoxelGrid, r: int, mode: MorphMode) -> np.ndarray:
    lo, shape = _dense_box(g.coords, r)
    occ = np.zeros(tuple(shape), dtype=bool)
    occ[tuple((g.coords - lo).T)] = True
    vol = occ.copy()
    if mode == "erode" and g.bounded:
        # out-of-domain cells count as occupied so the neighborhood is clipped
        for axis in range(3):
            idx = np.arange(shape[axis]) + lo[axis]
            outside = (idx < 0) | (idx >= g.resolution)
            sl = [None, None, None]
            sl[axis] = slice(None)
            vol |= outside[tuple(sl)]
    for axis in range(3):
        src = vol
        vol = src.copy()
        dst = np.moveaxis(vol, axis, 0)
        s = np.moveaxis(src, axis, 0)
        for d in range(1, r + 1):
            if mode == "dilate":
                dst[d:] |= s[:-d]
                dst[:-d] |= s[d:]
            else:
                dst[d:] &= s[:-d]
                dst[:-d] &= s[d:]
                # neighbors past the padded box are empty
                dst[:d] = False
                dst[-d:] = False
    if mode == "erode":
        vol &= occ
    coords = np.argwhere(vol) + lo
    if mode == "dilate":
        coords = _clip_bounds(coords, g)
    return coords


def _morph_sparse(g: SparseVoxelGrid, r: int, mode: MorphMode) -> np.ndarray:
    if mode == "dilate":
        coords = g.coords
        for axis in range(3):
            shifted = []
            for d in range(-r, r + 1):
                c = coords.copy()
                c[:, axis] += d
                shifted.append(c)
            coords = _clip_bounds(np.concatenate(shifted), g)
            coords = unpack_keys(np.unique(pack_keys(coords)))
        return coords
    current = g.coords_only()
    for axis in range(3):
        keep = np.ones(len(current), dtype=bool)
        for d in range(-r, r + 1):
            if d == 0:
                continue
            c = current.coords.copy()
            c[:, axis] += d
            hit = current.contains(c)
            if g.bounded:
                hit |= (c[:, axis] < 0) | (c[:, axis] >= g.resolution)
            keep &= hit
        current = SparseVoxelGrid(current.coords[keep], None, g.resolution,
                                  g.voxel_size, g.bounded)
    return current.coords


# dense bitmap is used when the padded bounding box is at most this many
# cells per voxel (or below the absolute floor)
_DENSE_CELLS_PER_VOXEL = 64
_DENSE_FLOOR = 1 << 18
_DENSE_CAP = 1 << 28


def morph(g: SparseVoxelGrid, k: int, mode: MorphMode, *, method: str = "auto") -> SparseVoxelGrid:
    """Binary dilation or erosion with the full ``k x k x k`` cube.

    The cube is separable, so both operations run as three 1-D passes, either
    over a dense bitmap of the bounding box or over packed sparse keys
    (``method`` = ``"auto"``, ``"dense"`` or ``"sparse"``; results are
    identical). On bounded grids the neighborhood is clipped to ``[0, L)``:
    dilation never leaves the domain and erosion ignores neighbors outside it.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {k}")
    if mode not in ("dilate", "erode"):
        raise ValueError(f"unknown morph mode {mode!r}")
    r = k // 2
    if r == 0 or not len(g):
        return g.coords_only()
    if method == "auto":
        _, shape = _dense_box(g.coords, r)
        cells = int(np.prod(shape))
        dense_ok = cells <= _DENSE_CAP and cells <= max(_DENSE_FLOOR, _DENSE_CELLS_PER_VOXEL * len(g))
        method = "dense" if dense_ok else "sparse"
    if method == "dense":
        coords = _morph_dense(g, r, mode)
    elif method == "sparse":
        coords = _morph_sparse(g, r, mode)
    else:
        raise ValueError(f"unknown method {method!r}")
    return SparseVoxelGrid(coords, None, g.resolution, g.voxel_size, g.bounded)


def closing(g: SparseVoxelGrid, k: int) -> SparseVoxelGrid:
    return morph(morph(g, k, "dilate"), k, "erode")


def downsample_coords(g: SparseVoxelGrid, factor: int) -> SparseVoxelGrid:
    """Map every coordinate to its parent cell (floor division) and dedupe."""
    if factor < 2:
        raise ValueError("factor must be >= 2")
    parents = np.floor_divide(g.coords, factor)
    res = max(1, -(-g.resolution // factor))
    return canonicalize(parents, None, resolution=res, voxel_size=g.voxel_size * factor,
                        bounded=g.bounded)


def child_offsets(factor: int) -> np.ndarray:
    """All ``factor**3`` child offsets in canonical order (z fastest)."""
    r = np.arange(factor)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def upsample_coords(g: SparseVoxelGrid, factor: int) -> SparseVoxelGrid:
    """Replace every coordinate by its ``factor**3`` children."""
    if factor < 2:
        raise ValueError("factor must be >= 2")
    children = (g.coords[:, None, :] * factor + child_offsets(factor)[None]).reshape(-1, 3)
    out = SparseVoxelGrid.empty(g.resolution * factor, None, g.voxel_size / factor, g.bounded)
    children = _clip_bounds(children, out)
    return canonicalize(children, None, resolution=out.resolution,
                        voxel_size=out.voxel_size, bounded=g.bounded)


def simplify(g: SparseVoxelGrid, s: int) -> SparseVoxelGrid:
    """Round a grid up to full ``s``-aligned blocks at the original resolution."""
    up = upsample_coords(downsample_coords(g, s), s)
    coords = _clip_bounds(up.coords, g)
    return SparseVoxelGrid(coords, None, g.resolution, g.voxel_size, g.bounded)


def iou(a: SparseVoxelGrid, b: SparseVoxelGrid) -> float:
    inter = np.intersect1d(a.keys, b.keys, assume_unique=True).size
    union = len(a) + len(b) - inter
    if union == 0:
        return 1.0
    return inter / union


def occupancy_accuracy(pred_labels, gt_labels) -> float:
    pred = np.asarray(pred_labels).astype(bool).ravel()
    gt = np.asarray(gt_labels).astype(bool).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"label length mismatch: {pred.size} vs {gt.size}")
    if pred.size == 0:
        return 1.0
    return float(np.mean(pred == gt))


def dense_coords(n: int, offset=(0, 0, 0)) -> np.ndarray:
    """All coordinates of an ``n**3`` block in raster order (z fastest)."""
    return child_offsets(n) + np.asarray(offset, dtype=np.int64)
