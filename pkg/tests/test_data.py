import numpy as np
import pytest
from hypothesis import given, strategies as st

from lowlight_diffusion import data
from lowlight_diffusion.data import DegradationParams
from lowlight_diffusion.errors import ConfigError, DimensionError, FormatError


def test_no_motifs_gives_smooth_gradient():
    img = data.synth_scene(4, 32, 32, 0)
    # a linear ramp per channel: second differences vanish
    assert np.abs(np.diff(img.astype(np.float64), 2, axis=0)).max() < 1e-6
    assert np.abs(np.diff(img.astype(np.float64), 2, axis=1)).max() < 1e-6


def test_scene_is_deterministic():
    assert np.array_equal(data.synth_scene(11, 64, 48, 4), data.synth_scene(11, 64, 48, 4))
    assert not np.array_equal(data.synth_scene(11, 64, 48, 4), data.synth_scene(12, 64, 48, 4))


def test_four_stamps_are_pairwise_equal():
    layout = data.compose_scene(2, 64, 64, 1, stamps_per_motif=4)
    assert len(layout.stamps) == 4
    tiles = [layout.motif_layer[r:r + 8, c:c + 8] for _, r, c in layout.stamps]
    assert len({(r, c) for _, r, c in layout.stamps}) == 4
    for t in tiles[1:]:
        assert np.array_equal(t, tiles[0])


@given(st.integers(0, 10**6), st.integers(0, 6))
def test_every_motif_appears_at_least_three_times(seed, k):
    layout = data.compose_scene(seed, 64, 64, k)
    counts = np.bincount([m for m, _, _ in layout.stamps], minlength=k)
    assert np.all(counts >= 3)
    assert layout.image.min() >= 0 and layout.image.max() <= 1


def test_scene_too_small_or_too_crowded():
    with pytest.raises(DimensionError):
        data.synth_scene(0, 8, 32, 1)
    with pytest.raises(ConfigError):
        data.compose_scene(0, 16, 16, 2)  # 4 cells, 6+ stamps needed


def test_identity_degradation():
    x0 = data.synth_scene(1, 32, 32, 2)
    pair = data.degrade(x0, DegradationParams((1.0, 1.0), noise_sigma=0.0), np.random.default_rng(0))
    assert np.array_equal(pair.y, x0)


def test_constant_quarter_illumination():
    x0 = data.synth_scene(1, 32, 32, 2)
    pair = data.degrade(x0, DegradationParams((0.25, 0.25), noise_sigma=0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(pair.y, x0 / 4)


def test_noise_variance_monte_carlo():
    x0 = np.full((128, 128, 3), 0.5, np.float32)
    pair = data.degrade(x0, DegradationParams(noise_sigma=0.05), np.random.default_rng(3))
    mse = np.mean(pair.noise ** 2)
    assert abs(mse - 0.0025) < 0.1 * 0.0025
    np.testing.assert_allclose(np.clip(x0 * pair.illumination + pair.noise, 0, 1), pair.y, atol=1e-6)


@given(st.integers(0, 2**31), st.floats(0.0, 0.3), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_degrade_stays_in_unit_range(seed, sigma, s_lo, frac):
    s_hi = s_lo + (1.0 - s_lo) * frac
    x0 = data.synth_scene(seed % 1000, 16, 16, 1)
    pair = data.degrade(x0, DegradationParams((s_lo, s_hi), noise_sigma=sigma), np.random.default_rng(seed))
    assert pair.y.min() >= 0 and pair.y.max() <= 1
    S = pair.illumination
    assert S.min() >= s_lo - 1e-12 and S.max() <= s_hi + 1e-12
    if sigma == 0:
        assert np.all(pair.y <= x0)


def test_params_validation():
    with pytest.raises(ConfigError):
        DegradationParams((0.0, 0.5))
    with pytest.raises(ConfigError):
        DegradationParams((0.6, 0.5))
    with pytest.raises(ConfigError):
        DegradationParams(noise_sigma=-1)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.random((7, 5, 3)).astype(np.float32)
    data.save_ppm(img, tmp_path / "a.ppm")
    back = data.load_ppm(tmp_path / "a.ppm")
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 255


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_ppm_fixed_points(tmp_path, value):
    img = np.full((4, 4, 3), value, np.float32)
    data.save_ppm(img, tmp_path / "b.ppm")
    assert np.array_equal(data.load_ppm(tmp_path / "b.ppm"), img)


def test_ppm_rejects_wrong_magic(tmp_path):
    (tmp_path / "g.ppm").write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(FormatError, match="offset 0"):
        data.load_ppm(tmp_path / "g.ppm")


def test_ppm_truncated_payload_names_offset(tmp_path):
    (tmp_path / "t.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(FormatError, match="offset"):
        data.load_ppm(tmp_path / "t.ppm")


def test_ppm_header_with_comment(tmp_path):
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 255]))
    np.testing.assert_array_equal(data.load_ppm(tmp_path / "c.ppm")[0, 0], [1, 0, 1])


def test_full_size_crop(tiny_pair):
    crop = data.crop_patch_pair(tiny_pair, 32, np.random.default_rng(0))
    assert crop.origin == (0, 0) and np.array_equal(crop.x0, tiny_pair.x0)


def test_crop_bounds_and_alignment():
    pair = data.make_dataset(0, 1, 64)[0]
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = data.crop_patch_pair(pair, 32, rng)
        r0, c0 = c.origin
        assert 0 <= r0 <= 32 and 0 <= c0 <= 32
        assert np.array_equal(c.y, pair.y[r0:r0 + 32, c0:c0 + 32])
        assert np.array_equal(c.x0, pair.x0[r0:r0 + 32, c0:c0 + 32])


def test_crop_determinism_and_size_check(tiny_pair):
    a = [data.crop_patch_pair(tiny_pair, 8, np.random.default_rng(4)).origin for _ in range(5)]
    b = [data.crop_patch_pair(tiny_pair, 8, np.random.default_rng(4)).origin for _ in range(5)]
    assert a == b
    with pytest.raises(DimensionError):
        data.crop_patch_pair(tiny_pair, 33, np.random.default_rng(0))


def test_manifest_lists_each_pair_once_and_verifies(tmp_path):
    pairs = data.make_dataset(7, 3, 32)
    manifest = data.write_dataset(pairs, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 3 and len({l.split()[0] for l in lines}) == 3
    loaded = data.load_manifest(manifest)
    for p, q in zip(pairs, loaded):
        assert np.abs(p.x0 - q.x0).max() <= 1 / 255
    # same seed -> identical checksums
    manifest2 = data.write_dataset(data.make_dataset(7, 3, 32), tmp_path / "again")
    assert [l.split()[3:] for l in manifest2.read_text().splitlines()] == [l.split()[3:] for l in lines]


def test_manifest_detects_tampering(tmp_path):
    manifest = data.write_dataset(data.make_dataset(7, 1, 32), tmp_path)
    path = tmp_path / "pair0000_y.ppm"
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        data.load_manifest(manifest)


def test_pair_rngs_are_independent_of_count():
    a = data.make_dataset(5, 4, 32)
    b = data.make_dataset(5, 2, 32, start=2)
    assert np.array_equal(a[3].y, b[1].y)
