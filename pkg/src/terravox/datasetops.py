"""Dataset statistics and selection for aerial scene collections.

Height-stratified train/validation split, height-weighted sampling, the two
heightmap filters and the semantic class registry used to color and decode
BEV condition maps.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneRecord:
    id: str
    max_height: float
    source: str = ""

    def __post_init__(self):
        if not self.max_height >= 0:
            raise ValueError(f"scene {self.id}: max_height must be >= 0, got {self.max_height}")


def height_split(records: Sequence[SceneRecord], groups: int = 20, ratio: float = 1 / 120,
                 min_val: int = 8, rng: np.random.Generator | None = None,
                 ) -> tuple[list[str], list[str]]:
    """Stratified split over equal-width bins of scene height.

    Each non-empty bin sends ``max(round(ratio * size), min(min_val, size))``
    randomly chosen scenes to validation. Both returned id lists keep the
    input order.
    """
    if not records:
        raise ValueError("no records")
    if groups < 1:
        raise ValueError("groups must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    z = np.array([r.max_height for r in records], dtype=np.float64)
    lo, hi = float(z.min()), float(z.max())
    if hi > lo:
        bins = np.minimum(((z - lo) / (hi - lo) * groups).astype(np.int64), groups - 1)
    else:
        bins = np.zeros(len(z), dtype=np.int64)
    val = np.zeros(len(z), dtype=bool)
    for b in range(groups):
        members = np.flatnonzero(bins == b)
        size = members.size
        if not size:
            continue
        k = max(int(round(ratio * size)), min(min_val, size))
        val[rng.choice(members, size=k, replace=False)] = True
        logger.debug("height bin %d: %d scenes, %d to validation", b, size, k)
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate scene ids")
    return ([i for i, v in zip(ids, val) if not v], [i for i, v in zip(ids, val) if v])


def height_scores(records: Sequence[SceneRecord] | np.ndarray, alpha: float = 1.0,
                  clamp: float = 200.0, div: float = 10.0) -> np.ndarray:
    """Unnormalized ``(min(Z, clamp) / div) ** alpha`` per scene."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    z = np.array([r.max_height if isinstance(r, SceneRecord) else r for r in records], dtype=np.float64)
    return (np.minimum(z, clamp) / div) ** alpha


def sample_weights(records: Sequence[SceneRecord] | np.ndarray, alpha: float = 1.0,
                   clamp: float = 200.0, div: float = 10.0) -> np.ndarray:
    """Sampling probabilities proportional to :func:`height_scores`.

    Raises:
        ValueError: every score is zero, so no distribution exists.
    """
    z = height_scores(records, alpha, clamp, div)
    total = z.sum()
    if not total > 0:
        raise ValueError("all sampling scores are zero")
    return z / total


def filter_by_height(heightmap, t_h: float) -> bool:
    """Keep a scene whose tallest cell is at most ``t_h``."""
    h = np.asarray(heightmap, dtype=np.float64)
    if h.size == 0:
        raise ValueError("empty heightmap")
    return bool(h.max() <= t_h)


def mean_gradient(heightmap, cell_size: float = 1.0) -> float:
    """Mean gradient magnitude; central differences inside, one-sided at the borders."""
    h = np.asarray(heightmap, dtype=np.float64)
    if h.ndim != 2 or min(h.shape) < 2:
        raise ValueError("heightmap must be 2-D and at least 2x2")
    gy, gx = np.gradient(h, cell_size)
    return float(np.mean(np.hypot(gx, gy)))


def filter_by_gradient(heightmap, t_g: float, cell_size: float = 1.0) -> bool:
    """Keep a scene whose mean height gradient is at least ``t_g`` (rejects flat terrain)."""
    return mean_gradient(heightmap, cell_size) >= t_g


# -- semantic classes ---------------------------------------------------------------

@dataclass(frozen=True)
class SemanticClass:
    id: int
    name: str
    percentage: float
    rgb: tuple[int, int, int]


SEMANTIC_CLASSES: tuple[SemanticClass, ...] = (
    SemanticClass(1, "Agriculture Field", 1.5903, (60, 76, 231)),
    SemanticClass(2, "Woodland", 28.8137, (219, 152, 52)),
    SemanticClass(3, "Grassland", 27.8886, (113, 204, 46)),
    SemanticClass(4, "Building", 13.9675, (182, 89, 155)),
    SemanticClass(5, "Road", 8.4591, (15, 196, 241)),
    SemanticClass(6, "Excavated Land", 2.3485, (34, 126, 230)),
    SemanticClass(7, "Bare Land", 0.1045, (156, 188, 26)),
    SemanticClass(8, "Water", 1.6379, (160, 76, 231)),
    SemanticClass(9, "Pavement", 13.5912, (94, 73, 52)),
    SemanticClass(10, "Ship", 0.0470, (133, 160, 22)),
    SemanticClass(11, "Storage Tank", 0.0385, (43, 57, 192)),
    SemanticClass(12, "Baseball Diamond", 0.0610, (185, 128, 41)),
    SemanticClass(13, "Tennis Court", 0.0463, (96, 174, 39)),
    SemanticClass(14, "Basketball Court", 0.0290, (173, 68, 142)),
    SemanticClass(15, "Ground Track Field", 0.0375, (18, 156, 243)),
    SemanticClass(16, "Bridge", 0.0243, (0, 84, 211)),
    SemanticClass(17, "Vehicle", 0.9404, (141, 140, 127)),
    SemanticClass(18, "Helicopter", 0.0001, (137, 122, 108)),
    SemanticClass(19, "Swimming Pool", 0.1175, (89, 140, 163)),
    SemanticClass(20, "Roundabout", 0.0080, (182, 159, 97)),
    SemanticClass(21, "Soccer Ball Field", 0.2278, (206, 143, 187)),
    SemanticClass(22, "Plane", 0.0013, (43, 147, 240)),
    SemanticClass(23, "Harbor", 0.0141, (124, 175, 77)),
    SemanticClass(24, "Greenhouse", 0.0047, (46, 58, 176)),
    SemanticClass(25, "Solar Panel", 0.0012, (226, 173, 93)),
)

_BY_ID = {c.id: c for c in SEMANTIC_CLASSES}


def semantic_class(class_id: int) -> SemanticClass:
    try:
        return _BY_ID[int(class_id)]
    except KeyError:
        raise ValueError(f"unknown semantic class id {class_id}") from None


def semantic_color(class_id: int) -> tuple[int, int, int]:
    return semantic_class(class_id).rgb


def semantic_name(class_id: int) -> str:
    return semantic_class(class_id).name


def palette_lut() -> np.ndarray:
    """``(26, 3)`` uint8 colors indexed by class id; row 0 (unlabelled) is black."""
    lut = np.zeros((26, 3), dtype=np.uint8)
    for c in SEMANTIC_CLASSES:
        lut[c.id] = c.rgb
    return lut


def colorize(ids) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() > 25):
        raise ValueError("class ids must be in 0..25")
    return palette_lut()[ids]


def decode_semantic_rgb(rgb) -> np.ndarray:
    """Class ids of an ``(H, W, 3)`` palette image; black decodes to 0.

    Raises:
        ValueError: a pixel color is not in the palette.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError("expected an (H, W, 3) RGB image")
    rgb = rgb[..., :3].astype(np.int64)
    code = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    lut = palette_lut().astype(np.int64)
    keys = (lut[:, 0] << 16) | (lut[:, 1] << 8) | lut[:, 2]
    order = np.argsort(keys)
    pos = np.clip(np.searchsorted(keys[order], code), 0, len(keys) - 1)
    hit = keys[order][pos] == code
    if not hit.all():
        bad = rgb[~hit][0]
        raise ValueError(f"color {tuple(int(v) for v in bad)} is not a semantic class color")
    return order[pos].astype(np.int64)


# -- manifests --------------------------------------------------------------------

def read_manifest(path: str | os.PathLike) -> list[SceneRecord]:
    """Read JSON-lines scene records ``{"id", "max_height", "source"}``."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(SceneRecord(str(obj["id"]), float(obj["max_height"]), str(obj.get("source", ""))))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad scene record ({exc})") from None
    return records


def write_manifest(path: str | os.PathLike, records: Iterable[SceneRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "max_height": r.max_height, "source": r.source}) + "\n")


def write_ids(path: str | os.PathLike, ids: Sequence[str]) -> None:
    Path(path).write_text(json.dumps(list(ids)) + "\n")
