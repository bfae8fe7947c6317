"""Derived modalities and detrending against independent oracles."""
import logging
import math
from datetime import date as Date

import numpy as np
import pytest

from budd.cube import ForestMask
from budd.errors import CubeError
from budd.preprocess import (
    ComplexScenePair,
    apply_mask,
    compute_coherence,
    compute_ndvi,
    compute_ratio,
    derive_coherence_cube,
    detrend,
    forest_percentile,
    load_slc_pairs,
    save_slc_pairs,
)

from conftest import make_cube


def test_ndvi_basic_values():
    red = np.array([[0.1, 0.2]], dtype=np.float32)
    nir = np.array([[0.3, 0.2]], dtype=np.float32)
    out, valid = compute_ndvi(red, nir)
    assert out[0, 0] == pytest.approx(0.5)
    assert out[0, 1] == 0.0  # red == nir
    assert valid.all()


def test_ndvi_zero_denominator_invalid():
    out, valid = compute_ndvi(np.zeros((2, 2)), np.zeros((2, 2)))
    assert not valid.any()


def test_ndvi_range(rng):
    red = rng.random((16, 16)).astype(np.float32)
    nir = rng.random((16, 16)).astype(np.float32)
    out, valid = compute_ndvi(red, nir)
    assert (out[valid] >= -1.0).all() and (out[valid] <= 1.0).all()


def test_ndvi_shape_mismatch():
    with pytest.raises(CubeError):
        compute_ndvi(np.zeros((2, 2)), np.zeros((3, 2)))


def test_ratio_basic_values():
    vv = np.array([[0.04, 0.3, 0.5]], dtype=np.float32)
    vh = np.array([[0.01, 0.3, 0.0]], dtype=np.float32)
    out, valid = compute_ratio(vv, vh)
    assert out[0, 0] == pytest.approx(4.0)
    assert out[0, 1] == pytest.approx(1.0)
    assert not valid[0, 2]  # vh == 0
    assert valid[0, 0] and valid[0, 1]


def test_ratio_db_toggle():
    vv = np.array([[0.04]], dtype=np.float32)
    vh = np.array([[0.01]], dtype=np.float32)
    out, _ = compute_ratio(vv, vh, in_db=True)
    assert out[0, 0] == pytest.approx(10.0 * math.log10(4.0), abs=1e-5)


def _random_slc(rng, shape):
    return ((rng.normal(size=shape) + 1j * rng.normal(size=shape)) / np.sqrt(2)).astype(
        np.complex64
    )


def _pair(a, b):
    return ComplexScenePair(a, b, Date(2018, 1, 1), Date(2018, 1, 13), "descending", 10)


def test_coherence_global_scaling_invariance(rng):
    # gamma(s, c*exp(i*phi)*s) == 1 for any c > 0 and phase phi
    s = _random_slc(rng, (24, 24))
    for _ in range(10):
        c = float(rng.uniform(0.1, 10.0))
        phi = float(rng.uniform(0, 2 * np.pi))
        b = (c * np.exp(1j * phi) * s).astype(np.complex64)
        gamma, valid = compute_coherence(_pair(s, b), 7)
        assert valid.all()
        np.testing.assert_allclose(gamma, 1.0, atol=1e-6)


def test_coherence_white_noise_mean(rng):
    # Frozen Monte-Carlo oracle (10^4 independent 49-sample windows,
    # seed 2024): E[gamma] = 0.1279 +- 0.0007. Border windows shrink and
    # bias the scene mean up slightly; 0.01 covers both effects.
    a = _random_slc(rng, (128, 128))
    b = _random_slc(rng, (128, 128))
    gamma, valid = compute_coherence(_pair(a, b), 7)
    assert valid.all()
    assert abs(float(gamma.mean()) - 0.1279) < 0.01
    assert float(gamma.min()) >= 0.0 and float(gamma.max()) <= 1.0


def test_coherence_matches_bruteforce_windows(rng):
    # Oracle: direct per-pixel window loops with border clamping.
    h = w = 20
    a = _random_slc(rng, (h, w))
    b = _random_slc(rng, (h, w))
    gamma, _ = compute_coherence(_pair(a, b), 5)
    ac, bc = a.astype(np.complex128), b.astype(np.complex128)
    for i in range(h):
        for j in range(w):
            r0, r1 = max(i - 2, 0), min(i + 3, h)
            c0, c1 = max(j - 2, 0), min(j + 3, w)
            wa, wb = ac[r0:r1, c0:c1], bc[r0:r1, c0:c1]
            num = abs(np.sum(wa * np.conj(wb)))
            den = math.sqrt(float(np.sum(np.abs(wa) ** 2)) * float(np.sum(np.abs(wb) ** 2)))
            assert gamma[i, j] == pytest.approx(num / den, abs=1e-6)


def test_coherence_all_zero_invalid():
    z = np.zeros((8, 8), dtype=np.complex64)
    gamma, valid = compute_coherence(_pair(z, z + 1), 3)
    assert not valid.any()


def test_coherence_rejects_even_window(rng):
    s = _random_slc(rng, (8, 8))
    with pytest.raises(ValueError):
        compute_coherence(_pair(s, s), 4)
    with pytest.raises(ValueError):
        compute_coherence(_pair(s, s), 1)


def test_pair_validation(rng):
    s = _random_slc(rng, (4, 4))
    with pytest.raises(CubeError, match="not ordered"):
        ComplexScenePair(s, s, Date(2018, 2, 1), Date(2018, 1, 1))
    with pytest.raises(CubeError, match="shapes differ"):
        ComplexScenePair(s, _random_slc(rng, (5, 4)), Date(2018, 1, 1), Date(2018, 1, 2))


def test_slc_pairs_roundtrip_and_cube(tmp_path, rng):
    pairs = [
        ComplexScenePair(
            _random_slc(rng, (6, 5)), _random_slc(rng, (6, 5)),
            Date(2018, 1, 1 + 12 * k), Date(2018, 1, 13 + 12 * k),
            "ascending", 5,
        )
        for k in range(2)
    ]
    manifest = save_slc_pairs(pairs, 6, 5, 20.0, tmp_path / "slc")
    loaded, h, w, res = load_slc_pairs(manifest)
    assert (h, w, res) == (6, 5, 20.0)
    for orig, back in zip(pairs, loaded):
        np.testing.assert_array_equal(orig.scene_a, back.scene_a)
        np.testing.assert_array_equal(orig.scene_b, back.scene_b)

    cube = derive_coherence_cube(manifest, window=5)
    assert cube.modality == "coherence"
    assert len(cube) == 2
    # coherence scene carries the later acquisition date of its pair
    assert cube.scenes[0].date == Date(2018, 1, 13)


def test_apply_mask_materializes():
    cube = make_cube(n_scenes=2, with_masks=False)
    out = apply_mask(cube)
    assert all(m is not None for m in out.masks)
    assert all(m.all() for m in out.masks)
    for a, b in zip(out.pixels, cube.pixels):
        assert a.tobytes() == b.tobytes()


def test_masked_pixels_excluded_from_counts(rng):
    # count oracle: per-pixel sum of valid bits
    cube = make_cube(n_scenes=4, with_masks=True, seed=3)
    from budd.model import summarize_define_period

    stats = summarize_define_period({"ndvi": cube})["ndvi"]
    counts = np.zeros((cube.height, cube.width))
    for i in range(4):
        counts += cube.masks[i]
    assert stats["mean"] == pytest.approx(counts.mean())
    assert stats["min"] == counts.min() and stats["max"] == counts.max()


def _all_forest(h, w):
    return ForestMask(h, w, np.ones((h, w), dtype=np.uint8))


def test_detrend_constant_forest():
    cube = make_cube(height=12, width=12, n_scenes=2)
    for p in cube.pixels:
        p[:] = 0.8
    out = detrend(cube, _all_forest(12, 12), min_forest_pixels=10)
    for p in out.pixels:
        np.testing.assert_allclose(p, 0.0, atol=1e-6)


def test_detrend_percentile_fixpoint(rng):
    # Oracle: sort-based percentile with linear rank interpolation.
    cube = make_cube(height=20, width=20, n_scenes=3, seed=9)
    for p in cube.pixels:
        p[:] = rng.random((20, 20)).astype(np.float32)
    out = detrend(cube, _all_forest(20, 20), min_forest_pixels=10)
    for i, p in enumerate(out.pixels):
        vals = np.sort(p.reshape(-1).astype(np.float64))
        rank = 0.9 * (len(vals) - 1)
        lo, hi = int(np.floor(rank)), int(np.ceil(rank))
        p90 = vals[lo] + (rank - lo) * (vals[hi] - vals[lo])
        assert abs(p90) <= 1e-5
        # idempotence: a second detrend shifts by ~nothing
    out2 = detrend(out, _all_forest(20, 20), min_forest_pixels=10)
    for a, b in zip(out.pixels, out2.pixels):
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_detrend_shifts_all_valid_pixels():
    cube = make_cube(height=12, width=12, n_scenes=1, seed=4)
    forest = np.zeros((12, 12), dtype=np.uint8)
    forest[:, :6] = 1  # forest on the left half only
    p90 = forest_percentile(cube.pixels[0][:, :6], 90.0)
    out = detrend(cube, ForestMask(12, 12, forest), min_forest_pixels=10)
    np.testing.assert_allclose(
        out.pixels[0], cube.pixels[0] - np.float32(p90), atol=0, rtol=0
    )


def test_detrend_drops_scene_with_few_forest_pixels(caplog):
    cube = make_cube(height=8, width=8, n_scenes=2)
    forest = np.zeros((8, 8), dtype=np.uint8)
    forest[0, :5] = 1  # 5 forest pixels < default 100
    with caplog.at_level(logging.WARNING, logger="budd.preprocess"):
        out = detrend(cube, ForestMask(8, 8, forest))
    assert len(out) == 0
    assert sum("dropped" in r.message for r in caplog.records) == 2


def test_detrend_leaves_invalid_pixels_untouched(rng):
    cube = make_cube(height=12, width=12, n_scenes=1, with_masks=True, seed=6)
    out = detrend(cube, _all_forest(12, 12), min_forest_pixels=5)
    invalid = ~cube.masks[0]
    np.testing.assert_array_equal(out.pixels[0][invalid], cube.pixels[0][invalid])


def test_detrend_tiled_matches_per_window_detrend():
    from budd.preprocess import detrend_tiled

    cube = make_cube(height=40, width=40, n_scenes=2, seed=13)
    forest = _all_forest(40, 40)
    out = detrend_tiled(cube, forest, min_forest_pixels=50, tile_size=32)
    # each tile window independently equals a plain detrend of that window
    for (r0, r1, c0, c1) in ((0, 32, 0, 32), (0, 32, 32, 40), (32, 40, 0, 32), (32, 40, 32, 40)):
        win = detrend(cube.window(r0, r1, c0, c1), forest.window(r0, r1, c0, c1),
                      min_forest_pixels=50)
        for i in range(2):
            np.testing.assert_array_equal(out.pixels[i][r0:r1, c0:c1], win.pixels[i])


def test_detrend_tiled_masks_starved_tiles():
    from budd.preprocess import detrend_tiled

    cube = make_cube(height=40, width=40, n_scenes=1, seed=14)
    forest_cells = np.ones((40, 40), dtype=np.uint8)
    forest_cells[:32, :32] = 0  # first tile has no forest at all
    out = detrend_tiled(cube, ForestMask(40, 40, forest_cells),
                        min_forest_pixels=50, tile_size=32)
    assert len(out) == 1  # no scene drops in tiled mode
    assert not out.valid_mask(0)[:32, :32].any()
    assert out.valid_mask(0)[32:, :].all()
