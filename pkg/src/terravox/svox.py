"""SVOX: a small little-endian binary container for sparse voxel grids.

Layout::

    magic      4s   b"SVX1"
    version    u32  1
    L          u32  resolution (0 marks an unbounded grid)
    voxel_size f32
    N          u32  voxel count
    C          u16  feature channels (0 = coordinates only)
    reserved   u16  0
    coords     N x 3 i32, canonical order
    features   N x C f32, row-major

Features are always stored as float32, so writing a float64 grid is lossy;
float32 grids roundtrip bit-exactly.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .grid import SparseVoxelGrid, pack_keys

MAGIC = b"SVX1"
VERSION = 1
_HEADER = struct.Struct("<4sIIfIHH")


class SvoxError(ValueError):
    """Raised for malformed or non-canonical SVOX payloads."""


def encode_svox(g: SparseVoxelGrid) -> bytes:
    n, c = len(g), g.channels
    resolution = g.resolution if g.bounded else 0
    header = _HEADER.pack(MAGIC, VERSION, resolution, g.voxel_size, n, c, 0)
    coords = g.coords
    if coords.size and (coords.min() < -(2 ** 31) or coords.max() >= 2 ** 31):
        raise SvoxError("coordinates do not fit in int32")
    parts = [header, coords.astype("<i4").tobytes()]
    if c:
        parts.append(np.ascontiguousarray(g.features, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_svox(data: bytes) -> SparseVoxelGrid:
    if len(data) < _HEADER.size:
        raise SvoxError("truncated header")
    magic, version, resolution, voxel_size, n, c, reserved = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SvoxError(f"bad magic {magic!r}")
    if version != VERSION:
        raise SvoxError(f"unsupported version {version}")
    if reserved != 0:
        raise SvoxError("reserved header field must be 0")
    expected = _HEADER.size + 12 * n + 4 * n * c
    if len(data) < expected:
        raise SvoxError(f"truncated payload: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise SvoxError(f"trailing bytes: {len(data) - expected}")
    off = _HEADER.size
    coords = np.frombuffer(data, dtype="<i4", count=3 * n, offset=off).reshape(n, 3).astype(np.int64)
    off += 12 * n
    feats = None
    if c:
        feats = np.frombuffer(data, dtype="<f4", count=n * c, offset=off).reshape(n, c).astype(np.float32)
    keys = pack_keys(coords)
    if n > 1 and not np.all(keys[1:] > keys[:-1]):
        raise SvoxError("non-canonical coordinate order")
    bounded = resolution != 0
    try:
        return SparseVoxelGrid(coords, feats, resolution if bounded else 1, voxel_size, bounded)
    except ValueError as exc:
        raise SvoxError(str(exc)) from exc


def write_svox(g: SparseVoxelGrid, path: str | os.PathLike) -> None:
    data = encode_svox(g)
    with open(path, "wb") as fh:
        fh.write(data)


def read_svox(path: str | os.PathLike) -> SparseVoxelGrid:
    with open(path, "rb") as fh:
        return decode_svox(fh.read())
