"""Decode per-voxel parameter vectors into 2D Gaussian primitives and export PLY.

Every voxel carries 16 raw 23-vectors laid out as::

    offset(3) | scale(3) | opacity(1) | quaternion(4, w first) | sh(12)

The 12 SH values are three degree-0 coefficients followed by nine degree-1
coefficients (three per color channel).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .grid import SparseVoxelGrid

PRIMITIVES_PER_VOXEL = 16
RAW_WIDTH = 23
MIN_SCALE = 1e-6

PLY_PROPERTIES = (
    ["x", "y", "z"]
    + [f"scale_{i}" for i in range(3)]
    + ["opacity"]
    + [f"rot_{i}" for i in range(4)]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(9)]
)


@dataclass(frozen=True, eq=False)
class GaussianPrimitive2D:
    """One primitive; arrays are float64."""

    position: np.ndarray
    scale: np.ndarray
    opacity: float
    rotation: np.ndarray
    sh: np.ndarray

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.position, self.scale, [self.opacity], self.rotation, self.sh])


@dataclass(frozen=True, eq=False)
class GaussianBatch:
    """Structure-of-arrays view of many primitives (what the decoder returns)."""

    position: np.ndarray  # (M, 3)
    scale: np.ndarray  # (M, 3)
    opacity: np.ndarray  # (M,)
    rotation: np.ndarray  # (M, 4), w first
    sh: np.ndarray  # (M, 12)

    def __len__(self) -> int:
        return self.position.shape[0]

    def __getitem__(self, i: int) -> GaussianPrimitive2D:
        return GaussianPrimitive2D(self.position[i], self.scale[i], float(self.opacity[i]),
                                   self.rotation[i], self.sh[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def rows(self) -> np.ndarray:
        return np.concatenate([self.position, self.scale, self.opacity[:, None], self.rotation, self.sh], axis=1)

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "GaussianBatch":
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, RAW_WIDTH)
        return cls(rows[:, 0:3], rows[:, 3:6], rows[:, 6], rows[:, 7:11], rows[:, 11:23])

    @classmethod
    def from_primitives(cls, prims) -> "GaussianBatch":
        prims = list(prims)
        if not prims:
            return cls.from_rows(np.zeros((0, RAW_WIDTH)))
        return cls.from_rows(np.stack([p.as_row() for p in prims]))


def _sigmoid(x):
    # split by sign so large |x| neither overflows nor rounds to exactly 0 or 1 early
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode_primitives(raw, coords: SparseVoxelGrid, voxel_size: float | None = None) -> GaussianBatch:
    """Turn ``(N, 16, 23)`` raw parameters into ``16 * N`` primitives.

    Positions stay inside the half-voxel cube around each voxel center
    (``center + tanh(offset) * voxel_size / 2``), scales are ``exp`` clamped
    to ``[1e-6, 4 * voxel_size]``, opacity is logistic and quaternions are
    normalized with a zero quaternion decoding to the identity.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n = len(coords)
    if raw.ndim != 3 or raw.shape[1:] != (PRIMITIVES_PER_VOXEL, RAW_WIDTH):
        raise ValueError(f"raw parameters must be (N, {PRIMITIVES_PER_VOXEL}, {RAW_WIDTH}), got {raw.shape}")
    if raw.shape[0] != n:
        raise ValueError(f"{raw.shape[0]} raw rows for {n} voxels")
    vs = coords.voxel_size if voxel_size is None else float(voxel_size)
    if not vs > 0:
        raise ValueError("voxel_size must be positive")
    flat = raw.reshape(-1, RAW_WIDTH)
    centers = np.repeat((coords.coords.astype(np.float64) + 0.5) * vs, PRIMITIVES_PER_VOXEL, axis=0)

    position = centers + np.tanh(flat[:, 0:3]) * (vs / 2.0)
    with np.errstate(over="ignore"):
        scale = np.clip(np.exp(flat[:, 3:6]), MIN_SCALE, 4.0 * vs)
    opacity = _sigmoid(flat[:, 6].copy())
    # keep opacity strictly inside (0, 1) for extreme logits
    tiny = np.finfo(np.float64).eps
    opacity = np.clip(opacity, tiny, 1.0 - tiny)
    quat = flat[:, 7:11].copy()
    norm = np.linalg.norm(quat, axis=1)
    zero = norm == 0
    quat[zero] = (1.0, 0.0, 0.0, 0.0)
    norm[zero] = 1.0
    quat /= norm[:, None]
    return GaussianBatch(position, scale, opacity, quat, flat[:, 11:23].copy())


def _fmt(v: np.float32) -> str:
    # shortest repr that round-trips through float32
    return str(v)


def ply_bytes(prims: GaussianBatch) -> bytes:
    rows = prims.rows().astype(np.float32) if len(prims) else np.zeros((0, RAW_WIDTH), np.float32)
    header = ["ply", "format ascii 1.0", f"element vertex {rows.shape[0]}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    lines = header + [" ".join(_fmt(v) for v in row) for row in rows]
    return ("\n".join(lines) + "\n").encode("ascii")


def export_ply(prims, path: str | os.PathLike) -> None:
    """Write primitives as ASCII PLY, one vertex per primitive, 23 float properties."""
    if not isinstance(prims, GaussianBatch):
        prims = GaussianBatch.from_primitives(prims)
    data = ply_bytes(prims)
    with open(path, "wb") as fh:
        fh.write(data)


def parse_ply(data: bytes) -> GaussianBatch:
    """Parse the ASCII layout written by :func:`export_ply`."""
    text = data.decode("ascii")
    head, sep, body = text.partition("end_header\n")
    if not sep:
        raise ValueError("missing end_header")
    lines = head.splitlines()
    if not lines or lines[0] != "ply" or "format ascii 1.0" not in lines:
        raise ValueError("not an ASCII PLY file")
    count = None
    names = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            names.append(parts[-1])
    if count is None or names != PLY_PROPERTIES:
        raise ValueError("unexpected PLY layout")
    rows = [line.split() for line in body.splitlines() if line.strip()]
    if len(rows) != count:
        raise ValueError(f"header says {count} vertices, found {len(rows)}")
    arr = np.array(rows, dtype=np.float32).reshape(count, RAW_WIDTH)
    return GaussianBatch.from_rows(arr.astype(np.float64))


def read_ply(path: str | os.PathLike) -> GaussianBatch:
    with open(path, "rb") as fh:
        return parse_ply(fh.read())
