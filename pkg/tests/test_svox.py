from __future__ import annotations

import struct

import numpy as np
import pytest

from terravox.grid import SparseVoxelGrid, canonicalize
from terravox.svox import SvoxError, decode_svox, encode_svox, read_svox, write_svox


def random_grid(seed, n=10_000, channels=5, L=64):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, L, size=(n, 3))
    g = canonicalize(c, resolution=L, voxel_size=0.56)
    feats = rng.standard_normal((len(g), channels)).astype(np.float32) if channels else None
    return g.with_features(feats)


def reference_bytes(g):
    # independent encoder written from the documented layout
    out = bytearray(b"SVX1")
    out += struct.pack("<I", 1)
    out += struct.pack("<I", g.resolution if g.bounded else 0)
    out += struct.pack("<f", g.voxel_size)
    out += struct.pack("<I", len(g))
    out += struct.pack("<H", g.channels)
    out += struct.pack("<H", 0)
    for c in g.coords.tolist():
        out += struct.pack("<3i", *c)
    if g.channels:
        for row in g.features.tolist():
            out += struct.pack(f"<{g.channels}f", *row)
    return bytes(out)


def test_layout_matches_reference_encoder():
    g = random_grid(0, n=300, channels=3)
    assert encode_svox(g) == reference_bytes(g)


def test_empty_roundtrip(tmp_path):
    g = SparseVoxelGrid.empty(256, voxel_size=0.56)
    p = tmp_path / "e.svx"
    write_svox(g, p)
    first = p.read_bytes()
    write_svox(read_svox(p), p)
    assert p.read_bytes() == first
    assert len(first) == 24


def test_large_roundtrip_bit_exact(tmp_path):
    g = random_grid(1)
    p = tmp_path / "g.svx"
    write_svox(g, p)
    back = read_svox(p)
    assert np.array_equal(back.coords, g.coords)
    assert back.features.dtype == np.float32
    assert back.features.tobytes() == g.features.tobytes()
    assert back.resolution == g.resolution
    assert back.voxel_size == np.float32(0.56)
    write_svox(back, tmp_path / "h.svx")
    assert (tmp_path / "h.svx").read_bytes() == p.read_bytes()


def test_coords_only_and_unbounded():
    g = canonicalize(np.array([[-5, 3, 900], [2, -1, 0]]), bounded=False)
    back = decode_svox(encode_svox(g))
    assert not back.bounded and back.features is None
    assert np.array_equal(back.coords, g.coords)


def _with_swapped_rows(data):
    header = 24
    b = bytearray(data)
    first = b[header:header + 12]
    b[header:header + 12] = b[header + 12:header + 24]
    b[header + 12:header + 24] = first
    return bytes(b)


def test_rejects_noncanonical():
    data = encode_svox(random_grid(2, n=50, channels=0, L=8))
    with pytest.raises(SvoxError, match="non-canonical"):
        decode_svox(_with_swapped_rows(data))


def test_rejects_duplicates():
    g = canonicalize(np.array([[0, 0, 0], [1, 0, 0]]), resolution=4)
    data = bytearray(encode_svox(g))
    data[36:48] = data[24:36]
    with pytest.raises(SvoxError, match="non-canonical"):
        decode_svox(bytes(data))


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-1], "truncated|length"),
    (lambda b: b + b"\0", "trailing|length"),
    (lambda b: b[:10], "truncated"),
    (lambda b: b[:22] + struct.pack("<H", 1) + b[24:], "reserved"),
])
def test_rejects_malformed(mutate, match):
    data = encode_svox(random_grid(3, n=20, channels=2, L=8))
    with pytest.raises(SvoxError, match=match):
        decode_svox(mutate(data))


def test_rejects_out_of_bounds_coordinates():
    g = canonicalize(np.array([[0, 0, 0], [3, 3, 3]]), resolution=4)
    data = bytearray(encode_svox(g))
    data[8:12] = struct.pack("<I", 2)
    with pytest.raises(SvoxError):
        decode_svox(bytes(data))
