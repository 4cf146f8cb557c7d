"""Multi-view score aggregation and voxel feature assembly.

Per-pixel features from several rendered views are fused onto indexed 3D
elements (mesh vertices or voxels). Each contributing pixel is weighted by a
view-direction score and a distance score, both raised to a power::

    F_j = sum_c f_c * D_c**tau_d * S_c**tau_s / (sum_c D_c**tau_d * S_c**tau_s + eps)

``S`` is the absolute cosine between the view direction and the surface normal
and ``D = clamp(1 - clamp(d, 0, z_far) / z_far, 0, 1)``. Rasterization is not
done here: each view brings its own element-index map (``-1`` = no hit).
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-4


@dataclass(frozen=True)
class AggregationConfig:
    z_far: float = 2.0
    tau_s: float = 3.0
    tau_d: float = 3.0
    eps: float = 1e-6

    def __post_init__(self):
        if not self.z_far > 0:
            raise ValueError("z_far must be positive")
        if self.tau_s < 0 or self.tau_d < 0:
            raise ValueError("exponents must be non-negative")


@dataclass(eq=False)
class ViewSample:
    """One rendered view.

    ``features`` is ``(H, W, F)``, ``depth`` and ``index`` are ``(H, W)``.
    View directions come either from ``view_dirs`` (``(H, W, 3)``, pointing
    from the surface to the camera) or from ``positions`` (surface points)
    together with ``origin``. ``normals`` may be omitted when per-element
    normals are handed to :func:`scatter_aggregate`. ``mask`` optionally
    excludes pixels (e.g. water).
    """

    features: np.ndarray
    depth: np.ndarray
    index: np.ndarray
    origin: np.ndarray | None = None
    normals: np.ndarray | None = None
    positions: np.ndarray | None = None
    view_dirs: np.ndarray | None = None
    mask: np.ndarray | None = None
    pose: dict | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def directions(self) -> np.ndarray:
        if self.view_dirs is not None:
            return np.asarray(self.view_dirs, dtype=np.float64)
        if self.positions is None or self.origin is None:
            raise ValueError("view needs view_dirs or positions + origin")
        d = np.asarray(self.origin, dtype=np.float64) - np.asarray(self.positions, dtype=np.float64)
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.where(n > 0, n, 1.0)


def _check_unit(v: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} must be unit length (tolerance {UNIT_TOL})")


def psi(x, tau: float):
    """Power weighting ``x**tau``."""
    return np.power(x, tau)


def view_score(view_dir, normal) -> np.ndarray:
    """Absolute cosine between a unit view direction and a unit normal."""
    view_dir = np.asarray(view_dir, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    _check_unit(view_dir, "view_dir")
    _check_unit(normal, "normal")
    return np.clip(np.abs(np.sum(view_dir * normal, axis=-1)), 0.0, 1.0)


def distance_score(d, z_far: float = 2.0) -> np.ndarray:
    d = np.clip(np.asarray(d, dtype=np.float64), 0.0, z_far)
    return np.clip(1.0 - d / z_far, 0.0, 1.0)


def view_weights(view: ViewSample, cfg: AggregationConfig,
                 element_normals: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel mask, element ids and weights of the contributing pixels of one view."""
    idx = np.asarray(view.index).astype(np.int64).ravel()
    valid = idx >= 0
    if view.mask is not None:
        valid &= np.asarray(view.mask, dtype=bool).ravel()
    ids = idx[valid]
    dirs = view.directions().reshape(-1, 3)[valid]
    if view.normals is not None:
        normals = np.asarray(view.normals, dtype=np.float64).reshape(-1, 3)[valid]
    elif element_normals is not None:
        normals = np.asarray(element_normals, dtype=np.float64)[ids]
    else:
        raise ValueError("no normals: pass per-pixel normals or element_normals")
    s = view_score(dirs, normals)
    d = distance_score(np.asarray(view.depth).ravel()[valid], cfg.z_far)
    return valid, ids, psi(d, cfg.tau_d) * psi(s, cfg.tau_s)


def scatter_aggregate(views: list[ViewSample], element_count: int,
                      cfg: AggregationConfig | None = None,
                      element_normals: np.ndarray | None = None) -> np.ndarray:
    """Score-weighted average of per-pixel features on each element.

    Views are reduced in list order. Elements that no pixel hits stay zero.
    """
    cfg = cfg or AggregationConfig()
    if not views:
        raise ValueError("no views")
    width = views[0].features.shape[-1]
    feature = np.zeros((element_count, width), dtype=np.float64)
    weights = np.zeros(element_count, dtype=np.float64)
    for i, view in enumerate(views):
        if view.features.shape[-1] != width:
            raise ValueError(f"view {i} has {view.features.shape[-1]} channels, expected {width}")
        idx = np.asarray(view.index)
        if idx.size and (idx.max() >= element_count or idx.min() < -1):
            raise IndexError(f"view {i} has element ids outside [-1, {element_count})")
        valid, ids, w = view_weights(view, cfg, element_normals)
        flat = np.asarray(view.features, dtype=np.float64).reshape(-1, width)
        np.add.at(feature, ids, flat[valid] * w[:, None])
        np.add.at(weights, ids, w)
        logger.debug("view %d: %d contributing pixels", i, ids.size)
    return feature / (weights[:, None] + cfg.eps)


def contribution_counts(views: list[ViewSample]) -> list[int]:
    counts = []
    for view in views:
        valid = np.asarray(view.index).ravel() >= 0
        if view.mask is not None:
            valid &= np.asarray(view.mask, dtype=bool).ravel()
        counts.append(int(valid.sum()))
    return counts


# -- voxel feature assembly -------------------------------------------------

PYRAMID_SCALES = (1, 2, 4)
PYRAMID_CHANNELS = 16
VOXEL_FEATURE_WIDTH = 3 * PYRAMID_CHANNELS + 15 + 3


def build_pyramid(fmap: np.ndarray) -> list[np.ndarray]:
    """Nearest downscales at 1/1, 1/2 and 1/4 (top-left sample of each block)."""
    fmap = np.asarray(fmap)
    h, w = fmap.shape[:2]
    if h % 4 or w % 4:
        raise ValueError(f"feature map {h}x{w} is not divisible by 4")
    return [fmap[::s, ::s] for s in PYRAMID_SCALES]


_CROSS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


def cross_sample_rgb(image: np.ndarray, pixel) -> np.ndarray:
    """RGB of a pixel and its 4-neighbors, border-clamped, as a 15-vector.

    ``pixel`` is ``(u, v)`` = (column, row); the order is center, left, right,
    up, down.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    u, v = int(pixel[0]), int(pixel[1])
    if not (0 <= u < w and 0 <= v < h):
        raise ValueError(f"pixel {(u, v)} outside {w}x{h} image")
    out = []
    for du, dv in _CROSS:
        uu = min(max(u + du, 0), w - 1)
        vv = min(max(v + dv, 0), h - 1)
        out.append(image[vv, uu, :3])
    return np.concatenate(out)


def assemble_voxel_feature(pyramid: list[np.ndarray], image: np.ndarray, normal, pixel) -> np.ndarray:
    """Concatenate [f0; f1; f2; rgb cross; normal] into a 66-vector."""
    if len(pyramid) != len(PYRAMID_SCALES):
        raise ValueError("pyramid must have three levels")
    u, v = int(pixel[0]), int(pixel[1])
    parts = []
    for level, s in zip(pyramid, PYRAMID_SCALES):
        if level.shape[-1] != PYRAMID_CHANNELS:
            raise ValueError(f"pyramid levels need {PYRAMID_CHANNELS} channels, got {level.shape[-1]}")
        parts.append(level[v // s, u // s])
    parts.append(cross_sample_rgb(image, (u, v)))
    normal = np.asarray(normal, dtype=np.float64).ravel()
    if normal.shape != (3,):
        raise ValueError("normal must be a 3-vector")
    parts.append(normal)
    out = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])
    assert out.shape == (VOXEL_FEATURE_WIDTH,)
    return out


# -- view directory I/O -------------------------------------------------------
#
# manifest.json:
#   {"height": H, "width": W, "features": F, "element_count": E (optional),
#    "views": [{"features": "v0_feat.f32", "depth": "v0_depth.f32",
#               "index": "v0_index.i32", "normals": "...f32" (optional),
#               "positions": "...f32" | "view_dirs": "...f32",
#               "mask": "...u8" (optional), "origin": [x, y, z],
#               "pose": {...} (optional)}]}
# Arrays are flat little-endian; f32 unless the extension says i32/u8.

_DTYPES = {".f32": "<f4", ".i32": "<i4", ".u8": "u1"}


def _load_flat(path: Path, count: int) -> np.ndarray:
    dtype = _DTYPES.get(path.suffix, "<f4")
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != count:
        raise ValueError(f"{path.name}: {arr.size} values, expected {count}")
    return arr


def load_views(directory: str | os.PathLike) -> tuple[list[ViewSample], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    h, w, f = int(manifest["height"]), int(manifest["width"]), int(manifest["features"])
    entries = manifest.get("views") or []
    if not entries:
        raise ValueError("manifest lists no views")
    views = []
    for entry in entries:
        def arr(key, ch):
            name = entry.get(key)
            if name is None:
                return None
            a = _load_flat(directory / name, h * w * ch)
            return a.reshape(h, w, ch) if ch > 1 else a.reshape(h, w)
        views.append(ViewSample(
            features=arr("features", f).reshape(h, w, f).astype(np.float64),
            depth=arr("depth", 1).astype(np.float64),
            index=arr("index", 1).astype(np.int64),
            origin=None if entry.get("origin") is None else np.asarray(entry["origin"], dtype=np.float64),
            normals=arr("normals", 3),
            positions=arr("positions", 3),
            view_dirs=arr("view_dirs", 3),
            mask=arr("mask", 1),
            pose=entry.get("pose"),
        ))
    return views, manifest


def save_views(directory: str | os.PathLike, views: list[ViewSample], element_count: int | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = views[0].shape
    entries = []
    for i, v in enumerate(views):
        entry: dict = {}
        for key, ext in (("features", ".f32"), ("depth", ".f32"), ("index", ".i32"),
                         ("normals", ".f32"), ("positions", ".f32"), ("view_dirs", ".f32"),
                         ("mask", ".u8")):
            a = getattr(v, key)
            if a is None:
                continue
            name = f"view{i:03d}_{key}{ext}"
            np.ascontiguousarray(a, dtype=_DTYPES[ext]).tofile(directory / name)
            entry[key] = name
        if v.origin is not None:
            entry["origin"] = [float(x) for x in v.origin]
        if v.pose is not None:
            entry["pose"] = v.pose
        entries.append(entry)
    manifest = {"height": h, "width": w, "features": int(views[0].features.shape[-1]), "views": entries}
    if element_count is not None:
        manifest["element_count"] = int(element_count)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
