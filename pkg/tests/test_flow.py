from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from terravox.flow import (ConstantOracleField, GenerationConfig, GuidanceConfig, ScheduleConfig,
                           VelocityField, builtin_field, builtin_field_pair, cfg_combine,
                           coarse_to_fine_generate, euler_sample, make_timesteps, seeded_random_field,
                           shape_oracle_field, shift_time, sliding_window_generate, tile_starts)
from terravox.grid import SparseVoxelGrid, canonicalize, iou

import _oracles as O


def state(n=10, c=4, seed=0):
    rng = np.random.default_rng(seed)
    g = canonicalize(rng.integers(0, 1000, (n, 3)), resolution=1000)
    return g.with_features(rng.standard_normal((len(g), c)))


def box(lo, hi, L):
    r = [range(a, b) for a, b in zip(lo, hi)]
    c = [(x, y, z) for x in r[0] for y in r[1] for z in r[2]]
    return canonicalize(np.array(c), resolution=L)


class ZeroField:
    def evaluate(self, state, t, condition):
        return np.zeros_like(state.features)


class CountingField:
    def __init__(self, cond_value=1.0, uncond_value=0.0):
        self.calls = []
        self.cond_value, self.uncond_value = cond_value, uncond_value

    def evaluate(self, state, t, condition):
        self.calls.append(condition is not None)
        v = self.cond_value if condition is not None else self.uncond_value
        return np.full(state.features.shape, v)


# -- schedule ---------------------------------------------------------------------

def test_defaults():
    assert ScheduleConfig().steps == 25 and ScheduleConfig().shift == 3.0
    assert GuidanceConfig().scale == 3.0


def test_config_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(steps=0)
    with pytest.raises(ValueError):
        ScheduleConfig(shift=0)
    with pytest.raises(ValueError):
        GuidanceConfig(scale=-1)


def test_shift_examples():
    assert shift_time(0.5, 3.0) == 0.75
    for s in (0.2, 1.0, 3.0, 10.0):
        assert shift_time(1.0, s) == 1.0 and shift_time(0.0, s) == 0.0


def test_shift_one_is_linspace_bit_exact():
    for steps in (1, 5, 25, 100):
        assert np.array_equal(make_timesteps(ScheduleConfig(steps, 1.0)), np.linspace(1.0, 0.0, steps + 1))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.floats(0.05, 20.0))
def test_schedule_invariants(steps, shift):
    ts = make_timesteps(ScheduleConfig(steps, shift))
    assert len(ts) == steps + 1
    assert ts[0] == 1.0 and ts[-1] == 0.0
    assert np.all(np.diff(ts) < 0)


def test_shift_reference_values():
    ts = make_timesteps(ScheduleConfig(4, 3.0))
    u = np.array([1.0, 0.75, 0.5, 0.25, 0.0])
    np.testing.assert_allclose(ts, 3 * u / (1 + 2 * u), rtol=0, atol=1e-15)


def test_cfg_combine():
    vu, vc = np.array([0.0, 1.0]), np.array([1.0, 3.0])
    assert np.array_equal(cfg_combine(vu, vc, 1.0), vc)
    assert np.array_equal(cfg_combine(vu, vc, 0.0), vu)
    assert cfg_combine(0.0, 1.0, 3.0) == 3.0
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), np.zeros(3), 1.0)


# -- euler ----------------------------------------------------------------------------

@pytest.mark.parametrize("steps", [1, 5, 25])
@pytest.mark.parametrize("shift", [1.0, 3.0])
def test_constant_oracle_recovers_x0(steps, shift):
    rng = np.random.default_rng(steps)
    init = state(50, 8, seed=steps)
    x0 = rng.standard_normal(init.features.shape)
    field = ConstantOracleField(x0, init.features)
    out = euler_sample(field, init, ScheduleConfig(steps, shift), GuidanceConfig(1.0))
    assert np.max(np.abs(out.features - x0)) <= 1e-6


def test_zero_field_identity():
    init = state()
    out = euler_sample(ZeroField(), init)
    assert np.array_equal(out.features, init.features) and out.same_coords(init)


def test_shape_violation():
    class Bad:
        def evaluate(self, state, t, condition):
            return np.zeros((1, 1))

    with pytest.raises(ValueError):
        euler_sample(Bad(), state())


def test_guidance_calls():
    cond = state(2, 1)
    f = CountingField()
    euler_sample(f, state(), ScheduleConfig(3, 1.0), GuidanceConfig(3.0), cond)
    assert f.calls == [True, False] * 3
    f = CountingField()
    euler_sample(f, state(), ScheduleConfig(3, 1.0), GuidanceConfig(3.0), None)
    assert f.calls == [False] * 3
    f = CountingField()
    euler_sample(f, state(), ScheduleConfig(3, 1.0), GuidanceConfig(1.0), cond)
    assert f.calls == [True] * 3


def test_guided_velocity_applied():
    init = state(5, 2)
    f = CountingField(cond_value=1.0, uncond_value=0.0)
    out = euler_sample(f, init, ScheduleConfig(1, 1.0), GuidanceConfig(3.0), state(1, 1))
    # v = 0 + 3 * (1 - 0), dt = -1
    np.testing.assert_allclose(out.features, init.features - 3.0)


def test_protocol_runtime_check():
    assert isinstance(ConstantOracleField(0.0, 0.0), VelocityField)
    assert isinstance(seeded_random_field(1), VelocityField)


# -- built-in fields ------------------------------------------------------------------------

def test_builtin_field_kinds():
    s = state()
    f = builtin_field("constant-oracle", x0=np.ones_like(s.features), eps=s.features)
    np.testing.assert_array_equal(f.evaluate(s, 0.3, None), s.features - 1.0)
    a = builtin_field("seeded-random", seed=42).evaluate(s, 0.5, None)
    b = builtin_field("seeded-random", seed=42).evaluate(s, 0.5, None)
    assert np.array_equal(a, b)
    c = builtin_field("seeded-random", seed=43).evaluate(s, 0.5, None)
    assert not np.array_equal(a, c)
    with pytest.raises(ValueError):
        builtin_field("learned")


def test_shape_oracle_field_drives_to_targets():
    target = box((1, 1, 1), (3, 4, 2), 8)
    dense = canonicalize(np.argwhere(np.ones((8, 8, 8))), resolution=8)
    init = dense.with_features(np.random.default_rng(0).standard_normal((len(dense), 1)))
    out = euler_sample(shape_oracle_field(target), init, ScheduleConfig(25, 3.0))
    expected = np.where(target.contains(dense.coords), 1.0, -1.0)
    np.testing.assert_allclose(out.features[:, 0], expected, atol=1e-9)


# -- coarse to fine ---------------------------------------------------------------------------

def test_c2f_shape_oracle_reproduces_target():
    target = box((2, 1, 0), (6, 5, 3), 8)
    cf, lf = builtin_field_pair("shape-oracle", target=target)
    res = coarse_to_fine_generate(cf, lf, None, GenerationConfig(resolution=64))
    assert not res.empty
    assert iou(res.coords, target) == 1.0
    assert len(res.latents) == len(target)
    assert np.all(res.latents.features > 0.3)
    assert O.as_set(res.latents.coords) <= O.as_set(res.roughened.coords)
    assert O.as_set(res.coarse.coords) <= O.as_set(res.roughened.coords)
    d = res.diagnostics
    assert d["steps"] == 25 and d["kept_voxels"] == len(target) and d["coarse_voxels"] == len(target)


class ConstField:
    def __init__(self, value):
        self.value = value

    def evaluate(self, state, t, condition):
        x = state.features
        return (x - self.value) / max(t, 1e-12)


def test_c2f_all_negative_is_empty_signal():
    res = coarse_to_fine_generate(ConstField(-1.0), ConstField(1.0), None, GenerationConfig(resolution=32))
    assert res.empty and res.empty_stage == "coarse"
    assert len(res.coords) == 0


def test_c2f_low_latents_filtered():
    res = coarse_to_fine_generate(ConstField(1.0), ConstField(0.2), None, GenerationConfig(resolution=32))
    assert res.empty and res.empty_stage == "latent"
    assert len(res.roughened) == 64


def test_c2f_deterministic_and_seeded():
    cf, lf = builtin_field_pair("seeded-random", seed=7)
    cfg = GenerationConfig(resolution=64, seed=3)
    a = coarse_to_fine_generate(cf, lf, None, cfg)
    b = coarse_to_fine_generate(cf, lf, None, cfg)
    assert a.latents.same_coords(b.latents)
    assert a.latents.features.tobytes() == b.latents.features.tobytes()
    assert O.as_set(a.latents.coords) <= O.as_set(a.roughened.coords)


def test_c2f_with_condition_uses_guidance():
    target = box((0, 0, 0), (2, 2, 2), 4)
    cf, lf = builtin_field_pair("shape-oracle", target=target)
    cond = SparseVoxelGrid(np.array([[0, 0, 16]]), np.ones((1, 1)), 32)
    res = coarse_to_fine_generate(cf, lf, cond, GenerationConfig(resolution=32))
    assert iou(res.coords, target) == 1.0


def test_generation_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig(resolution=60)


# -- sliding window ------------------------------------------------------------------------------

def test_tile_starts():
    assert tile_starts(32, 32, 8) == [0]
    assert tile_starts(20, 32, 8) == [0]
    starts = tile_starts(82, 32, 8)
    assert starts[0] == 0 and starts[-1] + 32 == 82
    for a, b in zip(starts, starts[1:]):
        assert b - a <= 32 - 8
    with pytest.raises(ValueError):
        tile_starts(82, 32, 32)


def test_648_map_tiling_covers_with_overlap():
    # 648 voxels at L=256, overlap 64: latent units 81 (82 after block padding), window 32, overlap 8
    starts = tile_starts(82, 32, 8)
    assert len(starts) == 4
    covered = np.zeros(82, bool)
    for s in starts:
        covered[s:s + 32] = True
    assert covered.all() and 82 * 8 >= 648


def test_sliding_single_tile_equals_c2f():
    cf, lf = builtin_field_pair("seeded-random", seed=5)
    cfg = GenerationConfig(resolution=64, seed=11)
    sem = np.zeros((64, 64), int)
    res = sliding_window_generate(sem, cf, lf, cfg, overlap=16)
    ref = coarse_to_fine_generate(cf, lf, None, cfg)
    assert res.diagnostics["tiles"] == 1
    assert res.grid.same_coords(ref.latents)
    assert res.grid.features.tobytes() == ref.latents.features.tobytes()


def test_sliding_overlap_consistency():
    cf, lf = builtin_field_pair("seeded-random", seed=2)
    cfg = GenerationConfig(resolution=64, seed=0)
    sem = np.random.default_rng(0).integers(0, 5, (112, 64))
    res = sliding_window_generate(sem, cf, lf, cfg, overlap=16)
    assert res.diagnostics["tiles"] == 2
    first, second = res.tiles
    overlap = first.latents.coords[:, 0] >= 6  # latent columns shared with the second tile
    shared = first.latents.coords[overlap]
    rows = second.latents.index_of(shared)
    assert np.all(rows >= 0)
    assert second.latents.features[rows].tobytes() == first.latents.features[overlap].tobytes()
    m = res.grid
    for t in res.tiles:
        r = m.index_of(t.latents.coords)
        assert np.all(r >= 0)
        assert m.features[r].tobytes() == t.latents.features.tobytes()


def test_sliding_shape_oracle_full_overlap():
    # target spans both tiles; every tile reproduces its part and the merge is the target
    target = box((1, 1, 1), (13, 6, 4), 14)
    cf, lf = builtin_field_pair("shape-oracle", target=target)
    sem = np.ones((112, 64), int)
    res = sliding_window_generate(sem, cf, lf, GenerationConfig(resolution=64), overlap=16)
    assert iou(res.grid, target) == 1.0


def test_sliding_validation():
    cf, lf = builtin_field_pair("seeded-random")
    with pytest.raises(ValueError):
        sliding_window_generate(np.zeros((64, 64)), cf, lf, GenerationConfig(resolution=64), overlap=12)
    with pytest.raises(ValueError):
        sliding_window_generate(np.zeros((64, 64)), cf, lf, GenerationConfig(resolution=64), overlap=64)
