"""Flow-matching sampling and coarse-to-fine structure generation.

Convention (rectified flow): ``x_t = (1 - t) * x0 + t * eps`` with data at
``t = 0`` and noise at ``t = 1``; a velocity field predicts ``eps - x0``.
Sampling integrates from ``t = 1`` down to ``t = 0`` with explicit Euler steps
on a shifted time grid ``t = s * u / (1 + (s - 1) * u)``.

Velocity fields are anything with ``evaluate(state, t, condition)``, where
``state`` is a :class:`~terravox.grid.SparseVoxelGrid` whose feature rows are
the current sample. Learned networks plug in here; the built-in fields are
analytic stand-ins used for testing and demos.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .augment import roughen
from .geo import lift_semantic_plane
from .grid import SparseVoxelGrid, dense_coords
from .pss import LATENT_CHANNELS, coarse_threshold, latent_magnitude_filter, zero_invalid_features

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    steps: int = 25
    shift: float = 3.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.shift > 0:
            raise ValueError("shift must be positive")


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 3.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be non-negative")


def shift_time(u, shift: float):
    """Map ``u`` in [0, 1] to ``shift * u / (1 + (shift - 1) * u)``; 0 and 1 are fixed exactly."""
    u = np.asarray(u, dtype=np.float64)
    if shift == 1.0:
        t = u.copy()
    else:
        # rounding can push the u = 1 endpoint off 1.0 for some shifts
        t = np.where(u == 1.0, 1.0, shift * u / (1.0 + (shift - 1.0) * u))
    return t if t.ndim else float(t)


def make_timesteps(cfg: ScheduleConfig | None = None) -> np.ndarray:
    """``steps + 1`` shifted times, strictly decreasing from 1 to 0."""
    cfg = cfg or ScheduleConfig()
    u = np.linspace(1.0, 0.0, cfg.steps + 1)
    return shift_time(u, cfg.shift)


def cfg_combine(v_uncond, v_cond, scale: float):
    v_uncond = np.asarray(v_uncond)
    v_cond = np.asarray(v_cond)
    if v_uncond.shape != v_cond.shape:
        raise ValueError(f"velocity shapes differ: {v_uncond.shape} vs {v_cond.shape}")
    return v_uncond + scale * (v_cond - v_uncond)


@runtime_checkable
class VelocityField(Protocol):
    def evaluate(self, state: SparseVoxelGrid, t: float,
                 condition: SparseVoxelGrid | None) -> np.ndarray: ...


# called after each Euler step with (state features, next time); may edit in place
StepHook = Callable[[np.ndarray, float], np.ndarray]


def euler_sample(field: VelocityField, init: SparseVoxelGrid, schedule: ScheduleConfig | None = None,
                 guidance: GuidanceConfig | None = None, condition: SparseVoxelGrid | None = None,
                 post_step: StepHook | None = None) -> SparseVoxelGrid:
    """Integrate ``init`` (noise at t = 1) down to t = 0.

    With a condition and a guidance scale other than 1 the field is evaluated
    twice per step and combined as ``v_u + s * (v_c - v_u)``.
    """
    schedule = schedule or ScheduleConfig()
    guidance = guidance or GuidanceConfig()
    ts = make_timesteps(schedule)
    x = np.array(init.features, dtype=np.float64, copy=True)
    guided = condition is not None and guidance.scale != 1.0
    for t, t_next in zip(ts[:-1], ts[1:]):
        state = init.with_features(x)
        v = np.asarray(field.evaluate(state, float(t), condition), dtype=np.float64)
        if v.shape != x.shape:
            raise ValueError(f"velocity shape {v.shape} != state shape {x.shape}")
        if guided:
            v_u = np.asarray(field.evaluate(state, float(t), None), dtype=np.float64)
            if v_u.shape != x.shape:
                raise ValueError(f"velocity shape {v_u.shape} != state shape {x.shape}")
            v = cfg_combine(v_u, v, guidance.scale)
        x = x + (t_next - t) * v
        if post_step is not None:
            x = post_step(x, float(t_next))
    return init.with_features(x)


# -- built-in fields ------------------------------------------------------------

class ConstantOracleField:
    """Returns the fixed velocity ``eps - x0`` of a known noise/data pairing."""

    def __init__(self, x0, eps):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.eps = np.asarray(eps, dtype=np.float64)
        if self.x0.shape != self.eps.shape:
            raise ValueError("x0 and eps shapes differ")

    def evaluate(self, state, t, condition):
        return self.eps - self.x0


class TargetField:
    """Exact rectified-flow velocity toward a per-voxel target ``x0(coords)``.

    On the straight path ``x_t = (1 - t) x0 + t eps`` the velocity is
    ``eps - x0 = (x_t - x0) / t``, so Euler integration lands on ``x0`` from
    any starting noise.
    """

    def __init__(self, target_fn: Callable[[np.ndarray, int], np.ndarray]):
        self.target_fn = target_fn

    def evaluate(self, state, t, condition):
        x = np.asarray(state.features, dtype=np.float64)
        x0 = np.broadcast_to(self.target_fn(state.coords, x.shape[1]), x.shape)
        return (x - x0) / max(t, 1e-12)


def shape_oracle_field(target: SparseVoxelGrid, inside: float = 1.0, outside: float = -1.0) -> TargetField:
    """Field driving voxels of ``target`` to ``inside`` and all others to ``outside``."""
    def fn(coords, channels):
        hit = target.contains(coords)
        return np.where(hit, inside, outside)[:, None]
    return TargetField(fn)


def seeded_random_field(seed: int = 0, offset: float = 0.0, scale: float = 1.0,
                        length: float = 4.0, waves: int = 8) -> TargetField:
    """Field toward a smooth pseudo-random function of voxel coordinates.

    The target is a sum of ``waves`` random cosines per channel, generated from
    ``seed`` and the channel count, so the same seed always gives the same
    field.
    """
    cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    def params(channels):
        if channels not in cache:
            rng = np.random.default_rng([seed, channels])
            freq = rng.normal(0.0, 1.0 / length, size=(channels, waves, 3))
            phase = rng.uniform(0, 2 * np.pi, size=(channels, waves))
            amp = rng.normal(0.0, 1.0 / math.sqrt(waves), size=(channels, waves))
            cache[channels] = (freq, phase, amp)
        return cache[channels]

    def fn(coords, channels):
        freq, phase, amp = params(channels)
        arg = np.einsum("nd,cwd->ncw", coords.astype(np.float64), freq) + phase[None]
        return offset + scale * np.einsum("ncw,cw->nc", np.cos(arg), amp)

    return TargetField(fn)


FIELD_KINDS = ("constant-oracle", "seeded-random", "shape-oracle")


def builtin_field(kind: str, **params) -> VelocityField:
    """Construct a built-in field by name.

    ``constant-oracle`` takes ``x0`` and ``eps``; ``seeded-random`` takes
    ``seed`` (plus optional ``offset``, ``scale``, ``length``);
    ``shape-oracle`` takes ``target`` (a grid) and optional ``inside`` /
    ``outside`` values.
    """
    if kind == "constant-oracle":
        return ConstantOracleField(params["x0"], params["eps"])
    if kind == "seeded-random":
        return seeded_random_field(**params)
    if kind == "shape-oracle":
        return shape_oracle_field(**params)
    raise ValueError(f"unknown field kind {kind!r}; expected one of {FIELD_KINDS}")


def builtin_field_pair(kind: str, *, target: SparseVoxelGrid | None = None,
                       seed: int = 0) -> tuple[VelocityField, VelocityField]:
    """Class and latent fields for :func:`coarse_to_fine_generate`."""
    if kind == "shape-oracle":
        if target is None:
            raise ValueError("shape-oracle needs a target grid")
        return (shape_oracle_field(target, 1.0, -1.0), shape_oracle_field(target, 1.0, 0.0))
    if kind == "seeded-random":
        return (seeded_random_field(seed, offset=-0.2),
                seeded_random_field(seed + 1, offset=0.45, scale=0.5))
    raise ValueError(f"unknown field kind {kind!r} for generation")


# -- coarse-to-fine generation ----------------------------------------------------

@dataclass(frozen=True)
class GenerationConfig:
    """Parameters of one structure generation at voxel resolution ``resolution``.

    The generated grids live at ``resolution // 8`` per side.
    """

    resolution: int = 256
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    seed: int = 0
    roughen_kernel: int = 3
    roughen_factor: int = 2
    tau: float = 0.3
    frac: float = 0.5
    channels: int = LATENT_CHANNELS
    voxel_size: float = 0.56

    @property
    def latent_side(self) -> int:
        return self.resolution // 8

    def __post_init__(self):
        if self.resolution % 8 or self.resolution <= 0:
            raise ValueError("resolution must be a positive multiple of 8")


@dataclass(eq=False)
class GenerationResult:
    coords: SparseVoxelGrid
    latents: SparseVoxelGrid
    coarse: SparseVoxelGrid
    roughened: SparseVoxelGrid
    class_values: np.ndarray
    diagnostics: dict
    empty_stage: str | None = None

    @property
    def empty(self) -> bool:
        return self.empty_stage is not None


def _translated(g: SparseVoxelGrid, offset: np.ndarray) -> SparseVoxelGrid:
    if not np.any(offset):
        return g
    return SparseVoxelGrid(g.coords + offset, g.features, g.resolution, g.voxel_size, False)


def _generate_tile(class_field: VelocityField, latent_field: VelocityField,
                   condition: SparseVoxelGrid | None, cfg: GenerationConfig,
                   rng: np.random.Generator, offset=(0, 0, 0),
                   coarse_known: tuple[np.ndarray, np.ndarray] | None = None,
                   latent_known: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]] | None = None,
                   ) -> GenerationResult:
    side = cfg.latent_side
    offset = np.asarray(offset, dtype=np.int64)
    vs = cfg.voxel_size * 8

    # (1) dense class values
    dense = SparseVoxelGrid(dense_coords(side), None, side, vs, True)
    eps_c = rng.standard_normal((len(dense), 1))
    hook = None
    if coarse_known is not None:
        mask, known = coarse_known
        frozen_eps = eps_c[mask]

        def hook(x, t):
            x[mask] = (1.0 - t) * known + t * frozen_eps
            return x
    sampled = euler_sample(class_field, _translated(dense.with_features(eps_c), offset),
                           cfg.schedule, cfg.guidance, condition, hook)
    values = sampled.features[:, 0]

    # (2) threshold
    coarse = coarse_threshold(values, side, voxel_size=vs)
    diag = {"steps": cfg.schedule.steps, "shift": cfg.schedule.shift, "cfg": cfg.guidance.scale,
            "seed": cfg.seed, "resolution": cfg.resolution, "latent_side": side,
            "offset": [int(v) for v in offset], "coarse_voxels": len(coarse)}
    empty_latent = SparseVoxelGrid.empty(side, cfg.channels, vs)
    if not len(coarse):
        diag.update(roughened_voxels=0, latent_voxels=0, kept_voxels=0)
        return GenerationResult(coarse, empty_latent, coarse, coarse, values, diag, "coarse")

    # (3) roughen to match what the latent stage was trained on
    rough = roughen(coarse, cfg.roughen_kernel, cfg.roughen_factor)

    # (4) latents on the sparse set
    eps_l = rng.standard_normal((len(rough), cfg.channels))
    hook = None
    if latent_known is not None:
        mask, known = latent_known(rough.coords + offset)
        if mask.any():
            frozen_eps = eps_l[mask]

            def hook(x, t):
                x[mask] = (1.0 - t) * known + t * frozen_eps
                return x
    sampled = euler_sample(latent_field, _translated(rough.with_features(eps_l), offset),
                           cfg.schedule, cfg.guidance, condition, hook)
    latents = rough.with_features(sampled.features)

    # (5) magnitude filter, zero the rejected rows, keep the valid set
    valid = latent_magnitude_filter(latents, cfg.tau, cfg.frac)
    zeroed = zero_invalid_features(latents, valid)
    kept = latent_magnitude_filter(zeroed, cfg.tau, cfg.frac)
    diag.update(roughened_voxels=len(rough), latent_voxels=len(latents), kept_voxels=len(kept))
    logger.info("generation: coarse=%d roughened=%d kept=%d", len(coarse), len(rough), len(kept))
    return GenerationResult(kept.coords_only(), kept, coarse, rough, values, diag,
                            None if len(kept) else "latent")


def coarse_to_fine_generate(class_field: VelocityField, latent_field: VelocityField,
                            condition: SparseVoxelGrid | None = None,
                            cfg: GenerationConfig | None = None) -> GenerationResult:
    """Two-stage structure generation at ``cfg.resolution // 8`` per side.

    1. sample a dense class field and keep cells with value > 0;
    2. roughen the coarse set (dilate, then block-complete);
    3. sample 32-channel latents on the roughened set;
    4. keep voxels where more than ``frac`` of channels exceed ``tau``.

    An empty outcome is reported through ``result.empty`` /
    ``result.empty_stage`` rather than an exception.
    """
    cfg = cfg or GenerationConfig()
    rng = np.random.default_rng(cfg.seed)
    return _generate_tile(class_field, latent_field, condition, cfg, rng)


# -- sliding window ----------------------------------------------------------------

def tile_starts(size: int, window: int, overlap: int) -> list[int]:
    """Window start positions covering ``[0, size)`` with at least ``overlap`` shared.

    Starts advance by ``window - overlap``; the last one is clamped so the
    final window ends at ``size``.
    """
    if not 0 <= overlap < window:
        raise ValueError("overlap must be in [0, window)")
    if size <= window:
        return [0]
    stride = window - overlap
    count = 1 + -(-(size - window) // stride)
    return [min(k * stride, size - window) for k in range(count)]


@dataclass(eq=False)
class SlidingWindowResult:
    grid: SparseVoxelGrid
    tiles: list[GenerationResult]
    origins: list[tuple[int, int]]
    diagnostics: dict

    @property
    def empty(self) -> bool:
        return len(self.grid) == 0


def sliding_window_generate(sem: np.ndarray, class_field: VelocityField, latent_field: VelocityField,
                            cfg: GenerationConfig | None = None, overlap: int = 64,
                            ignore: int = 0) -> SlidingWindowResult:
    """Generate a scene larger than one window from a BEV semantic map.

    ``sem`` is indexed ``[x, y]`` at voxel resolution. Windows of
    ``cfg.resolution`` voxels are laid out row-major with ``overlap`` voxels
    shared (both multiples of 8; starts are aligned to the roughening block in
    latent cells). Inside the region already produced by earlier windows the
    sample is pinned after every Euler step to ``(1 - t) * known + t * eps``,
    so it finishes exactly on the earlier result. Earlier windows win when
    merging.
    """
    cfg = cfg or GenerationConfig()
    sem = np.asarray(sem)
    if overlap % 8:
        raise ValueError("overlap must be a multiple of 8")
    if not 0 <= overlap < cfg.resolution:
        raise ValueError("overlap must be in [0, window)")
    side = cfg.latent_side
    lo = overlap // 8
    block = cfg.roughen_factor

    def padded(n):
        n = -(-n // 8)
        return max(side, -(-n // block) * block)

    nx, ny = padded(sem.shape[0]), padded(sem.shape[1])
    xs = tile_starts(nx, side, lo)
    ys = tile_starts(ny, side, lo)
    if any(s % block for s in xs + ys):
        raise ValueError("window, overlap and roughening block are not aligned")
    extent = max(nx, ny, side)
    vs = cfg.voxel_size * 8

    class_known = np.zeros((nx, ny, side))
    covered = np.zeros((nx, ny), dtype=bool)
    merged_coords: list[np.ndarray] = []
    merged_feats: list[np.ndarray] = []
    merged = SparseVoxelGrid.empty(extent, cfg.channels, vs)
    tiles, origins = [], []
    seeds = np.random.SeedSequence(cfg.seed)
    for k, (x0, y0) in enumerate((x, y) for x in xs for y in ys):
        rng = np.random.default_rng(cfg.seed if k == 0 else seeds.spawn(1)[0])
        offset = np.array([x0, y0, 0])
        crop = sem[x0 * 8:x0 * 8 + cfg.resolution, y0 * 8:y0 * 8 + cfg.resolution]
        condition = lift_semantic_plane(crop, cfg.resolution, ignore) if crop.size else None
        foot = covered[x0:x0 + side, y0:y0 + side]
        coarse_known = None
        latent_known = None
        if foot.any():
            cell_mask = np.repeat(foot.reshape(-1), side)
            known = class_known[x0:x0 + side, y0:y0 + side].reshape(-1)[cell_mask][:, None]
            coarse_known = (cell_mask, known)
            snapshot = merged

            def latent_known(coords, _snap=snapshot):
                mask = covered[coords[:, 0], coords[:, 1]]
                rows = _snap.index_of(coords[mask])
                vals = np.zeros((int(mask.sum()), cfg.channels))
                hit = rows >= 0
                vals[hit] = _snap.features[rows[hit]]
                return mask, vals

        res = _generate_tile(class_field, latent_field, condition, cfg, rng, offset,
                             coarse_known, latent_known)
        res.coords = _translated(res.coords, offset)
        res.latents = _translated(res.latents, offset)
        tiles.append(res)
        origins.append((x0 * 8, y0 * 8))

        fresh = ~foot
        vals = res.class_values.reshape(side, side, side)
        region = class_known[x0:x0 + side, y0:y0 + side]
        region[fresh] = vals[fresh]
        if len(res.latents):
            c = res.latents.coords
            new = ~covered[c[:, 0], c[:, 1]]
            merged_coords.append(c[new])
            merged_feats.append(res.latents.features[new])
            allc = np.concatenate(merged_coords)
            allf = np.concatenate(merged_feats)
            order = np.lexsort((allc[:, 2], allc[:, 1], allc[:, 0]))
            merged = SparseVoxelGrid(allc[order], allf[order], extent, vs, True)
        covered[x0:x0 + side, y0:y0 + side] = True

    diag = {"tiles": len(tiles), "tile_origins": origins, "window": cfg.resolution,
            "overlap": overlap, "voxels": len(merged), "seed": cfg.seed}
    return SlidingWindowResult(merged, tiles, origins, diag)
