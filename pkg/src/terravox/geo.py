"""Geodetic transforms, pinhole cameras and viewpoint planning.

Cameras follow the OpenGL convention: the world-from-camera rotation maps the
camera's +X (right), +Y (up) and +Z (backward) axes into the world, so the
camera looks along its local -Z. Scene frames are local ENU (x east, y north,
z up), meters.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import SparseVoxelGrid, canonicalize

# WGS84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)

CONDITION_VOXEL_SIZE = 0.56


@dataclass(frozen=True)
class GeodeticCoord:
    lat: float
    lon: float
    height: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")


def _as_llh(coord) -> np.ndarray:
    if isinstance(coord, GeodeticCoord):
        return np.array([coord.lat, coord.lon, coord.height], dtype=np.float64)
    llh = np.asarray(coord, dtype=np.float64)
    if llh.shape[-1] != 3:
        raise ValueError("expected (..., 3) latitude/longitude/height")
    if np.any(np.abs(llh[..., 0]) > 90.0) or np.any(np.abs(llh[..., 1]) > 180.0):
        raise ValueError("latitude/longitude out of range")
    return llh


def geodetic_to_ecef(coord) -> np.ndarray:
    """WGS84 latitude/longitude (degrees) and ellipsoidal height to ECEF meters.

    Accepts a :class:`GeodeticCoord` or an ``(..., 3)`` array.
    """
    llh = _as_llh(coord)
    lat = np.radians(llh[..., 0])
    lon = np.radians(llh[..., 1])
    h = llh[..., 2]
    slat, clat = np.sin(lat), np.cos(lat)
    n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * slat * slat)
    x = (n + h) * clat * np.cos(lon)
    y = (n + h) * clat * np.sin(lon)
    z = (n * (1.0 - WGS84_E2) + h) * slat
    return np.stack([x, y, z], axis=-1)


def enu_rotation(origin) -> np.ndarray:
    """Rows are the east, north and up unit vectors at ``origin`` in ECEF."""
    llh = _as_llh(origin)
    lat, lon = math.radians(float(llh[0])), math.radians(float(llh[1]))
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array([
        [-so, co, 0.0],
        [-sl * co, -sl * so, cl],
        [cl * co, cl * so, sl],
    ])


def ecef_to_enu(p, origin) -> np.ndarray:
    rot = enu_rotation(origin)
    d = np.asarray(p, dtype=np.float64) - geodetic_to_ecef(origin)
    return d @ rot.T


def enu_to_ecef(p, origin) -> np.ndarray:
    rot = enu_rotation(origin)
    return np.asarray(p, dtype=np.float64) @ rot + geodetic_to_ecef(origin)


# -- cameras ------------------------------------------------------------------

ORTHO_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "position", p)

    @property
    def forward(self) -> np.ndarray:
        return -self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation

    def to_world(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.position


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 180.0
    width: int = 640
    height: int = 360

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal lengths and image size must be positive")

    def unproject(self, u, v, depth) -> np.ndarray:
        """Pixel ``(u, v)`` at distance ``depth`` along -Z to camera-frame points."""
        d = np.asarray(depth, dtype=np.float64)
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx * d
        y = -(np.asarray(v, dtype=np.float64) - self.cy) / self.fy * d
        return np.stack([x, y, -d], axis=-1)

    def project(self, cam_points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera-frame points to ``(u, v, depth)``; depth > 0 in front."""
        p = np.asarray(cam_points, dtype=np.float64)
        d = -p[..., 2]
        u = self.cx + self.fx * p[..., 0] / d
        v = self.cy - self.fy * p[..., 1] / d
        return u, v, d


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose at ``eye`` whose -Z axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(f)
    if norm == 0:
        raise ValueError("eye and target coincide")
    f /= norm
    s = np.cross(f, np.asarray(up, dtype=np.float64))
    sn = np.linalg.norm(s)
    if sn < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    s /= sn
    u = np.cross(s, f)
    return CameraPose(np.stack([s, u, -f], axis=1), eye)


def project_points(points, cam: PinholeCamera, pose: CameraPose):
    return cam.project(pose.to_camera(points))


# -- condition projection -----------------------------------------------------

def depth_to_condition_voxels(depth: np.ndarray, cam: PinholeCamera, pose: CameraPose,
                              voxel_size: float = CONDITION_VOXEL_SIZE,
                              features: np.ndarray | None = None) -> SparseVoxelGrid:
    """Unproject a depth map into an unbounded voxel grid.

    Pixels with depth 0 are skipped. World points are binned with
    ``floor(point / voxel_size)`` about the world origin. Optional per-pixel
    ``features`` (``(H, W, F)``) follow their pixel; the first pixel (row-major)
    landing in a voxel wins.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError(f"depth map {depth.shape} does not match camera {cam.height}x{cam.width}")
    if np.any(depth < 0):
        raise ValueError("negative depth")
    v, u = np.nonzero(depth > 0)
    pts = pose.to_world(cam.unproject(u, v, depth[v, u]))
    coords = np.floor(pts / voxel_size).astype(np.int64)
    feats = None
    if features is not None:
        features = np.asarray(features)
        if features.shape[:2] != depth.shape:
            raise ValueError("features and depth dims differ")
        feats = features[v, u].reshape(len(u), -1)
    return canonicalize(coords, feats, resolution=1, voxel_size=voxel_size, bounded=False)


def lift_semantic_plane(sem: np.ndarray, L: int = 256, ignore: int = 0) -> SparseVoxelGrid:
    """Place every labelled cell ``(i, j)`` of a BEV semantic map at height ``L // 2``."""
    sem = np.asarray(sem)
    if sem.ndim != 2:
        raise ValueError("semantic map must be 2-D")
    if max(sem.shape) > L:
        raise ValueError(f"semantic map {sem.shape} larger than L={L}")
    i, j = np.nonzero(sem != ignore)
    coords = np.stack([i, j, np.full_like(i, L // 2)], axis=1)
    feats = sem[i, j].astype(np.float32).reshape(-1, 1)
    return SparseVoxelGrid(coords, feats, L, 1.0, True)


def expand_condition_plane(plane: SparseVoxelGrid, layers: int | None = None) -> SparseVoxelGrid:
    """Repeat a single-layer grid across every z layer of its resolution."""
    layers = plane.resolution if layers is None else layers
    if not len(plane):
        return plane
    zs = np.unique(plane.coords[:, 2])
    if zs.size != 1:
        raise ValueError("condition plane spans more than one z layer")
    n = len(plane)
    coords = np.repeat(plane.coords, layers, axis=0)
    coords[:, 2] = np.tile(np.arange(layers), n)
    feats = None if plane.features is None else np.repeat(plane.features, layers, axis=0)
    return SparseVoxelGrid(coords, feats, max(plane.resolution, layers), plane.voxel_size, plane.bounded)


# -- viewpoint planning -------------------------------------------------------

def square_perimeter(center, half: float, n: int) -> np.ndarray:
    """``n`` points evenly spaced by arc length along an axis-aligned square.

    Starts at the midpoint of the +x edge and runs counter-clockwise.
    """
    center = np.asarray(center, dtype=np.float64)
    pts = []
    perim = 8.0 * half
    for k in range(n):
        s = (k * perim / n + half) % perim  # arc length from the (+h, -h) corner
        side, t = divmod(s, 2.0 * half)
        t -= half
        if side == 0:
            xy = (half, t)
        elif side == 1:
            xy = (-t, half)
        elif side == 2:
            xy = (-half, -t)
        else:
            xy = (t, -half)
        pts.append(center[:2] + np.asarray(xy))
    return np.asarray(pts).reshape(n, 2)


def _ray_to_square(center_xy, p_xy, half: float) -> np.ndarray:
    d = p_xy - center_xy
    return center_xy + d * (half / np.max(np.abs(d)))


@dataclass(frozen=True)
class TopPoseConfig:
    altitude: float = 500.0
    outer_half: float = 300.0
    inner_half: float = 50.0
    per_square: int = 8


def plan_top_pose(center, cfg: TopPoseConfig | None = None) -> list[CameraPose]:
    """Two concentric squares of downward-tilted views at a fixed altitude.

    Outer cameras look at the scene center. Inner cameras look outward, at the
    point where the ray from the center through the camera meets the outer
    square on the ground; for edge-midpoint cameras this is the midpoint of the
    nearest outer edge.
    """
    cfg = cfg or TopPoseConfig()
    center = np.asarray(center, dtype=np.float64)
    z = center[2] + cfg.altitude
    poses = []
    for xy in square_perimeter(center, cfg.outer_half, cfg.per_square):
        poses.append(look_at([xy[0], xy[1], z], center))
    for xy in square_perimeter(center, cfg.inner_half, cfg.per_square):
        t = _ray_to_square(center[:2], xy, cfg.outer_half)
        poses.append(look_at([xy[0], xy[1], z], [t[0], t[1], center[2]]))
    return poses


@dataclass(eq=False)
class HeightField:
    """Terrain plus building heights on a regular raster.

    ``heights[row, col]`` covers x in ``origin[0] + col * cell_size`` and y in
    ``origin[1] + row * cell_size``.
    """

    heights: np.ndarray
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        if self.heights.ndim != 2 or self.heights.size == 0:
            raise ValueError("height field must be a non-empty 2-D raster")
        if self.cell_size < 0:
            raise ValueError("cell size must be non-negative")

    @property
    def center(self) -> np.ndarray:
        rows, cols = self.heights.shape
        return np.array([self.origin[0] + cols * self.cell_size / 2,
                         self.origin[1] + rows * self.cell_size / 2])

    @property
    def max_height(self) -> float:
        return float(self.heights.max())

    def cell_of(self, xy) -> tuple[int, int] | None:
        if self.cell_size == 0:
            return None
        col = int(math.floor((xy[0] - self.origin[0]) / self.cell_size))
        row = int(math.floor((xy[1] - self.origin[1]) / self.cell_size))
        rows, cols = self.heights.shape
        if 0 <= row < rows and 0 <= col < cols:
            return row, col
        return None


@dataclass(frozen=True)
class AdaLevelConfig:
    min_altitude: float = 75.0
    top_margin: float = 225.0
    levels: int = 9
    per_ring: int = 6
    base_half_width: float = 300.0
    top_half_width: float = 50.0


def adalevel_altitudes(heightfield: HeightField, cfg: AdaLevelConfig) -> np.ndarray:
    top = heightfield.max_height + cfg.top_margin
    return np.linspace(cfg.min_altitude, max(top, cfg.min_altitude), cfg.levels)


def plan_adalevel(heightfield: HeightField, cfg: AdaLevelConfig | None = None,
                  blocked: np.ndarray | None = None) -> list[CameraPose]:
    """Rings of views that shrink as they climb.

    Ring altitudes run from ``min_altitude`` to the tallest height plus
    ``top_margin``; ring half-widths interpolate linearly from
    ``base_half_width`` to ``top_half_width``. Every camera looks at the ground
    center. ``blocked`` is a boolean raster aligned with the height field; a
    camera is dropped when its cell is blocked or it sits at or below the
    surface.
    """
    cfg = cfg or AdaLevelConfig()
    c2 = heightfield.center
    target = np.array([c2[0], c2[1], 0.0])
    alts = adalevel_altitudes(heightfield, cfg)
    span = alts[-1] - alts[0]
    poses = []
    for alt in alts:
        w = 0.0 if span == 0 else (alt - alts[0]) / span
        half = (1 - w) * cfg.base_half_width + w * cfg.top_half_width
        for xy in square_perimeter(c2, half, cfg.per_ring):
            cell = heightfield.cell_of(xy)
            if cell is not None:
                if blocked is not None and blocked[cell]:
                    continue
                if alt <= heightfield.heights[cell]:
                    continue
            poses.append(look_at([xy[0], xy[1], alt], target))
    return poses


@dataclass(frozen=True)
class SpiralConfig:
    turns: float = 3.0
    points: int = 36
    margin: float = 50.0
    min_alt: float = 30.0
    radius_start: float = 80.0
    radius_end: float = 160.0


def plan_building_spiral(center, building_height: float,
                         cfg: SpiralConfig | None = None) -> list[CameraPose]:
    """Archimedean spiral descending around a building, looking at its middle.

    Sample ``k`` sits at azimuth ``k * turns * 360 / points`` degrees, radius
    growing linearly with azimuth, altitude falling linearly from
    ``building_height + margin`` to ``min_alt``.
    """
    cfg = cfg or SpiralConfig()
    if building_height < 0:
        raise ValueError("building height must be non-negative")
    if cfg.points <= 0:
        return []
    center = np.asarray(center, dtype=np.float64)
    target = center + np.array([0.0, 0.0, building_height / 2.0])
    k = np.arange(cfg.points)
    theta = np.radians(k * cfg.turns * 360.0 / cfg.points)
    frac = k / max(cfg.points - 1, 1)
    radius = cfg.radius_start + (cfg.radius_end - cfg.radius_start) * frac
    alts = np.linspace(building_height + cfg.margin, cfg.min_alt, cfg.points)
    poses = []
    for th, r, a in zip(theta, radius, alts):
        eye = [center[0] + r * math.cos(th), center[1] + r * math.sin(th), center[2] + a]
        poses.append(look_at(eye, target))
    return poses


# -- serialization ------------------------------------------------------------

def pose_to_json(pose: CameraPose, cam: PinholeCamera | None = None) -> dict:
    cam = cam or PinholeCamera()
    return {
        "position": [float(x) for x in pose.position],
        "rotation": [float(x) for x in pose.rotation.ravel()],
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
    }


def pose_from_json(obj: dict) -> tuple[CameraPose, PinholeCamera]:
    pose = CameraPose(np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3),
                      np.asarray(obj["position"], dtype=np.float64))
    cam = PinholeCamera(obj["fx"], obj["fy"], obj["cx"], obj["cy"], int(obj["width"]), int(obj["height"]))
    return pose, cam


def save_poses(path: str | os.PathLike, poses: Sequence[CameraPose], cam: PinholeCamera | None = None) -> None:
    Path(path).write_text(json.dumps([pose_to_json(p, cam) for p in poses], indent=1))


def load_poses(path: str | os.PathLike) -> list[tuple[CameraPose, PinholeCamera]]:
    return [pose_from_json(o) for o in json.loads(Path(path).read_text())]


def save_heightfield(path: str | os.PathLike, hf: HeightField) -> None:
    path = Path(path)
    np.ascontiguousarray(hf.heights, dtype="<f4").tofile(path)
    rows, cols = hf.heights.shape
    path.with_suffix(".json").write_text(json.dumps(
        {"rows": rows, "cols": cols, "cell_size": hf.cell_size, "origin": list(hf.origin)}))


def load_heightfield(path: str | os.PathLike) -> HeightField:
    """Read an f32 raster plus its JSON header (same stem, ``.json``)."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    rows, cols = int(header["rows"]), int(header["cols"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path.name}: {data.size} values, header says {rows}x{cols}")
    return HeightField(data.reshape(rows, cols).astype(np.float64), float(header.get("cell_size", 1.0)),
                       tuple(header.get("origin", (0.0, 0.0))))
