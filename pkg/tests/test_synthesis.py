import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from derain.imio import read_png, write_png
from derain.synthesis import (ConfigError, DatasetError, HazeError, HazeParams,
                              SynthesisConfig, build_dataset, compose_haze_only,
                              compose_heavy_rain, compose_light_rain, derive_mask,
                              load_dataset, procedural_backgrounds, render_streak_layer,
                              replay_manifest, save_dataset, streak_count)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- streak rendering

def test_zero_density_gives_empty_layer():
    layer = render_streak_layer(SynthesisConfig(density=0), 0, (32, 40), rng())
    assert layer.data.shape == (32, 40)
    assert not layer.data.any()
    assert len(layer.streaks) == 0


def test_rendering_is_deterministic():
    cfg = SynthesisConfig()
    a = render_streak_layer(cfg, 0, (48, 48), rng(7))
    b = render_streak_layer(cfg, 0, (48, 48), rng(7))
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.streaks, b.streaks)


@pytest.mark.parametrize("density,shape", [(2.0, (64, 64)), (4.0, (30, 50)), (0.7, (33, 33))])
def test_streak_count_follows_density(density, shape):
    layer = render_streak_layer(SynthesisConfig(density=density), 0, shape, rng(1))
    assert abs(len(layer.streaks) - density * shape[0] * shape[1] / 1000) <= 1
    assert (layer.data >= 0).all()


def test_orientations_within_jitter():
    cfg = SynthesisConfig(directions=(70.0,), direction_jitter=4.0, density=8)
    layer = render_streak_layer(cfg, 0, (64, 64), rng(3))
    assert layer.direction == 70.0
    assert np.all(np.abs(layer.streaks[:, 2] - 70.0) <= 4.0)


def test_45_degree_streaks_lie_on_45_degree_segments():
    cfg = SynthesisConfig(directions=(45.0,), direction_jitter=0.0, density=2.0)
    layer = render_streak_layer(cfg, 0, (64, 64), rng(11))
    assert len(layer.streaks) == 8
    # Oracle: every nonzero pixel must be within the streak half-width of a
    # segment through a recorded centre along the unit vector (1, 1)/sqrt(2),
    # and inside the segment's extent.
    u = np.array([1.0, 1.0]) / math.sqrt(2.0)
    rows, cols = np.nonzero(layer.data)
    assert len(rows) > 0
    for r, c in zip(rows, cols):
        ok = False
        for x, y, _, length, width, _ in layer.streaks:
            v = np.array([c - x, r - y])
            along = v @ u
            across = abs(v[0] * u[1] - v[1] * u[0])
            if across <= width + 1e-9 and abs(along) <= length / 2 + width + 1e-9:
                ok = True
                break
        assert ok, (r, c)
    # and zero wherever no segment is close
    far = np.ones_like(layer.data, dtype=bool)
    rr, cc = np.mgrid[0:64, 0:64]
    for x, y, _, length, width, _ in layer.streaks:
        along = (cc - x) * u[0] + (rr - y) * u[1]
        across = np.abs((cc - x) * u[1] - (rr - y) * u[0])
        far &= ~((across <= width) & (np.abs(along) <= length / 2 + width))
    assert not layer.data[far].any()


def test_bad_shape_and_index_raise():
    cfg = SynthesisConfig()
    with pytest.raises(ConfigError):
        render_streak_layer(cfg, 0, (0, 10), rng())
    with pytest.raises(ConfigError):
        render_streak_layer(cfg, 1, (10, 10), rng())
    with pytest.raises(ConfigError):
        SynthesisConfig(length_range=(5, 2))
    with pytest.raises(ConfigError):
        SynthesisConfig(num_directions=6, overlap_count=5)


# ---------------------------------------------------------------- masks

def test_mask_of_zero_layers_is_zero():
    assert not derive_mask([np.zeros((8, 8)), np.zeros((8, 8))], 0.1).any()


def test_single_pixel_mask():
    s = np.zeros((8, 8))
    s[3, 5] = 0.5
    m = derive_mask([s], 0.1)
    assert m.sum() == 1 and m[3, 5] == 1
    assert set(np.unique(m)) <= {0, 1}


def test_mask_sums_layers_elementwise():
    a = np.full((6, 7), 0.05)
    b = np.full((6, 7), 0.07)
    b[0, 0] = 0.0
    m = derive_mask([a, b], 0.1)
    expected = np.zeros((6, 7), dtype=np.uint8)
    for i in range(6):
        for j in range(7):
            expected[i, j] = 1 if a[i, j] + b[i, j] > 0.1 else 0
    np.testing.assert_array_equal(m, expected)
    assert m[1, 1] == 1 and m[0, 0] == 0


def test_mask_shape_mismatch():
    with pytest.raises(ConfigError):
        derive_mask([np.zeros((4, 4)), np.zeros((4, 5))], 0.1)
    with pytest.raises(ConfigError):
        derive_mask([np.zeros((4, 4))], 0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), d1=st.floats(0, 6), extra=st.floats(0, 6))
def test_mask_monotone_in_density(seed, d1, extra):
    base = SynthesisConfig(directions=(80.0,), density=d1)
    more = SynthesisConfig(directions=(80.0,), density=d1 + extra)
    a = render_streak_layer(base, 0, (40, 40), rng(seed))
    b = render_streak_layer(more, 0, (40, 40), rng(seed))
    ma, mb = derive_mask([a], 0.05), derive_mask([b], 0.05)
    assert mb.sum() >= ma.sum()
    assert np.all(mb >= ma)


# ---------------------------------------------------------------- composition

def test_light_rain_identity_and_single_pixel():
    B = np.full((5, 5, 3), 0.2)
    np.testing.assert_array_equal(compose_light_rain(B, np.zeros((5, 5)), np.ones((5, 5))), B)
    S = np.zeros((5, 5))
    S[2, 3] = 0.5
    R = (S > 0).astype(np.uint8)
    O = compose_light_rain(B, S, R)
    np.testing.assert_allclose(O[2, 3], 0.7)
    mask = np.ones((5, 5), bool)
    mask[2, 3] = False
    np.testing.assert_allclose(O[mask], 0.2)


def test_light_rain_clips():
    O = compose_light_rain(np.full((2, 2, 3), 0.9), np.full((2, 2), 0.5), np.ones((2, 2)))
    assert 0.9 + 0.5 == pytest.approx(1.4)
    np.testing.assert_array_equal(O, 1.0)


def test_light_rain_shape_mismatch():
    with pytest.raises(ConfigError):
        compose_light_rain(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 5)))


def test_heavy_rain_reduces_to_light_at_unit_transmission():
    g = rng(2)
    B = g.random((9, 9, 3)) * 0.6
    S = g.random((9, 9)) * 0.4
    R = (S > 0.2).astype(np.uint8)
    np.testing.assert_array_equal(
        compose_heavy_rain(B, [S], R, HazeParams(1.0, 0.8)), compose_light_rain(B, S, R))


def test_heavy_rain_pure_veil():
    g = rng(4)
    O = compose_heavy_rain(g.random((6, 6, 3)), [g.random((6, 6))], np.ones((6, 6)),
                           HazeParams(0.0, (0.3, 0.5, 0.7)))
    np.testing.assert_allclose(O, np.broadcast_to([0.3, 0.5, 0.7], (6, 6, 3)))


def test_heavy_rain_matches_elementwise_formula():
    B = np.full((3, 4, 3), 0.4)
    s1, s2 = np.full((3, 4), 0.05), np.full((3, 4), 0.15)
    R = np.ones((3, 4), dtype=np.uint8)
    R[0, 0] = 0
    O = compose_heavy_rain(B, [s1, s2], R, HazeParams(0.5, 1.0))
    for i in range(3):
        for j in range(4):
            for c in range(3):
                v = 0.5 * (B[i, j, c] + (s1[i, j] + s2[i, j]) * R[i, j]) + 0.5 * 1.0
                assert O[i, j, c] == pytest.approx(min(max(v, 0.0), 1.0), abs=1e-12)
    assert O[1, 1, 0] == pytest.approx(0.8, abs=1e-12)
    assert O[0, 0, 0] == pytest.approx(0.7, abs=1e-12)


def test_haze_only():
    B = np.full((4, 4, 3), 0.3)
    np.testing.assert_array_equal(compose_haze_only(B, HazeParams(1.0, 0.9)), B)
    np.testing.assert_allclose(compose_haze_only(B, HazeParams(0.0, 0.9)), 0.9)
    O = compose_haze_only(B, HazeParams(0.7, 0.9))
    assert O[0, 0, 0] == pytest.approx(0.7 * 0.3 + 0.3 * 0.9, abs=1e-12)
    np.testing.assert_allclose(O, 0.48, atol=1e-12)


def test_haze_map_transmission():
    B = np.full((2, 3, 3), 0.5)
    alpha = np.array([[1.0, 0.5, 0.0], [0.2, 0.4, 0.6]])
    O = compose_haze_only(B, HazeParams(alpha, 1.0))
    np.testing.assert_allclose(O[..., 0], alpha * 0.5 + (1 - alpha))


@pytest.mark.parametrize("haze", [HazeParams(1.2, 0.5), HazeParams(-0.1, 0.5),
                                  HazeParams(0.5, 1.5), HazeParams(np.nan, 0.5)])
def test_invalid_haze_raises(haze):
    with pytest.raises(HazeError):
        compose_haze_only(np.zeros((2, 2, 3)), haze)
    with pytest.raises(HazeError):
        compose_heavy_rain(np.zeros((2, 2, 3)), [np.zeros((2, 2))], np.zeros((2, 2)), haze)


def test_heavy_overlap_bound():
    with pytest.raises(ConfigError):
        compose_heavy_rain(np.zeros((2, 2, 3)), [np.zeros((2, 2))] * 3, np.zeros((2, 2)),
                           HazeParams(1.0, 1.0), overlap_bound=2)


# ---------------------------------------------------------------- datasets

@pytest.fixture(scope="module")
def backgrounds():
    return procedural_backgrounds(6, (48, 48), seed=9)


def test_procedural_backgrounds_deterministic(backgrounds):
    again = procedural_backgrounds(6, (48, 48), seed=9)
    for a, b in zip(backgrounds, again):
        np.testing.assert_array_equal(a, b)
        assert a.shape == (48, 48, 3) and a.min() >= 0 and a.max() <= 1


def test_light_dataset_satisfies_model(backgrounds):
    cfg = SynthesisConfig(num_directions=3, seed=1, repeats=2)
    examples, manifest = build_dataset(backgrounds, cfg, "light")
    assert len(examples) == 12 and len(manifest["examples"]) == 12
    assert manifest["config"]["num_directions"] == 1
    for ex in examples:
        assert len(ex.params["directions"]) == 1
        expected = np.clip(ex.B + (ex.S * ex.R)[..., None], 0, 1)
        assert np.max(np.abs(ex.O - expected)) <= 1e-12
        np.testing.assert_array_equal(derive_mask([ex.S], cfg.mask_threshold), ex.R)


def test_heavy_dataset_has_five_directions(backgrounds):
    cfg = SynthesisConfig(num_directions=5, density=1.5, seed=4)
    examples, manifest = build_dataset(backgrounds, cfg, "heavy")
    for rec, ex in zip(manifest["examples"], examples):
        dirs = rec["directions"]
        assert len(dirs) == 5 and len(set(dirs)) == 5
        assert all(50 <= d <= 130 for d in dirs)
        assert 0.6 <= rec["alpha"] <= 0.95 and 0.7 <= rec["airlight"][0] <= 1.0
        a, A = rec["alpha"], np.array(rec["airlight"])
        expected = np.clip(a * (ex.B + (ex.S * ex.R)[..., None]) + (1 - a) * A, 0, 1)
        assert np.max(np.abs(ex.O - expected)) <= 1e-12


def test_heavy_without_haze(backgrounds):
    cfg = SynthesisConfig(num_directions=5, density=1.0, heavy_haze=False)
    examples, manifest = build_dataset(backgrounds[:2], cfg, "heavy")
    assert all(ex.haze is None for ex in examples)
    assert "alpha" not in manifest["examples"][0]


def test_haze_dataset(backgrounds):
    examples, manifest = build_dataset(backgrounds, SynthesisConfig(seed=2), "haze")
    for ex in examples:
        assert not ex.S.any() and not ex.R.any()
        np.testing.assert_allclose(ex.O, compose_haze_only(ex.B, ex.haze))


def test_empty_backgrounds_rejected():
    with pytest.raises(ConfigError):
        build_dataset([], SynthesisConfig(), "light")
    with pytest.raises(ConfigError):
        build_dataset([np.zeros((16, 16, 3))], SynthesisConfig(), "snow")


def test_manifest_replay_is_identical(backgrounds):
    cfg = SynthesisConfig(num_directions=5, density=1.5, seed=21)
    first, manifest = build_dataset(backgrounds, cfg, "heavy")
    again, _ = replay_manifest(manifest, backgrounds)
    for a, b in zip(first, again):
        for name in "OBSR":
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_replay_detects_changed_background(backgrounds):
    _, manifest = build_dataset(backgrounds, SynthesisConfig(), "light")
    changed = list(backgrounds)
    changed[0] = changed[0] * 0.5
    with pytest.raises(DatasetError):
        replay_manifest(manifest, changed)


def test_save_and_load_roundtrip(tmp_path, backgrounds):
    examples, manifest = build_dataset(backgrounds, SynthesisConfig(seed=5), "light")
    out = save_dataset(examples, manifest, tmp_path, "test")
    assert (out / "manifest.json").exists()
    assert len(list(out.glob("*_O.png"))) == len(examples)
    loaded, m2 = load_dataset(out)
    assert m2 == manifest
    for a, b in zip(examples, loaded):
        np.testing.assert_array_equal(a.R, b.R)
        assert np.max(np.abs(a.O - b.O)) <= 0.5 / 65535 + 1e-12
        # on-disk reconstruction stays within one 8-bit level where nothing saturated
        ok = (a.O < 1).all(axis=2) & (a.S < 1)
        err = np.abs(b.O - b.B - (b.S * b.R)[..., None])[ok]
        assert err.max() <= 1 / 255 + 1e-6


def test_load_missing_dataset(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope")


def test_png_roundtrip_8_and_16_bit(tmp_path):
    img = rng(0).random((7, 9, 3))
    write_png(tmp_path / "a.png", img, 16)
    write_png(tmp_path / "b.png", img, 8)
    assert np.max(np.abs(read_png(tmp_path / "a.png") - img)) <= 0.5 / 65535 + 1e-12
    assert np.max(np.abs(read_png(tmp_path / "b.png") - img)) <= 0.5 / 255 + 1e-12
    gray = rng(1).random((5, 6))
    write_png(tmp_path / "g.png", gray)
    assert read_png(tmp_path / "g.png").shape == (5, 6)
    assert read_png(tmp_path / "g.png", channels=3).shape == (5, 6, 3)


def test_streak_count_rounding():
    assert streak_count(2.0, (64, 64)) == 8
    assert streak_count(0.0, (64, 64)) == 0
    assert streak_count(1.0, (10, 50)) == 1  # 0.5 rounds up
