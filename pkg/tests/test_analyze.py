"""Map comparison, detection counting, render/decode round trips."""
import numpy as np
import pytest

from budd.analyze import (
    AGREE,
    ALERT_DETECTED,
    ALERT_NONE,
    ALERT_UNMODELED,
    A_ONLY,
    B_ONLY,
    EXCLUDED,
    PALETTES,
    alert_categories,
    compare_maps,
    count_detections,
    counts_table,
    decode,
    load_comparison_map,
    render,
    save_comparison_map,
    timing_differences,
)
from budd.detector import NO_DETECTION, UNMODELED
from budd.errors import CubeError


def _detmap(shape, detected=(), unmodeled=()):
    arr = np.full(shape, NO_DETECTION, dtype=np.int32)
    for r, c in detected:
        arr[r, c] = 17500
    for r, c in unmodeled:
        arr[r, c] = UNMODELED
    return arr


def test_identical_maps_fully_agree(rng):
    a = rng.integers(-1, 5, (6, 6)).astype(np.int32) * 1000
    cat, counts = compare_maps(a, a.copy())
    assert counts.agree == 36
    assert counts.a_only == counts.b_only == counts.excluded == 0
    assert (cat == AGREE).all()


def test_all_vs_none():
    a = np.full((4, 4), 17000, dtype=np.int32)
    b = np.full((4, 4), NO_DETECTION, dtype=np.int32)
    cat, counts = compare_maps(a, b)
    assert counts.a_only == 16
    assert (cat == A_ONLY).all()


def test_agreement_ignores_timing():
    a = np.full((2, 2), 17000, dtype=np.int32)
    b = np.full((2, 2), 18000, dtype=np.int32)
    _, counts = compare_maps(a, b)
    assert counts.agree == 4


def test_random_maps_match_pixel_loop_oracle(rng):
    for _ in range(10):
        a = rng.choice([-2, -1, 17000, 18000], size=(9, 7)).astype(np.int32)
        b = rng.choice([-2, -1, 17000, 18000], size=(9, 7)).astype(np.int32)
        cat, counts = compare_maps(a, b)
        expect = {"agree": 0, "a_only": 0, "b_only": 0, "excluded": 0}
        for r in range(9):
            for c in range(7):
                if a[r, c] == -2 or b[r, c] == -2:
                    code, key = EXCLUDED, "excluded"
                elif a[r, c] >= 0 and b[r, c] < 0:
                    code, key = A_ONLY, "a_only"
                elif b[r, c] >= 0 and a[r, c] < 0:
                    code, key = B_ONLY, "b_only"
                else:
                    code, key = AGREE, "agree"
                assert cat[r, c] == code
                expect[key] += 1
        assert counts.as_dict() == expect


def test_category_counts_sum_to_total(rng):
    a = rng.choice([-2, -1, 17000], size=(12, 12)).astype(np.int32)
    b = rng.choice([-2, -1, 17000], size=(12, 12)).astype(np.int32)
    _, counts = compare_maps(a, b)
    assert sum(counts.as_dict().values()) == 144
    assert counts.agree + counts.a_only + counts.b_only == 144 - counts.excluded


def test_compare_shape_mismatch():
    with pytest.raises(ValueError):
        compare_maps(np.zeros((2, 2), np.int32), np.zeros((2, 3), np.int32))


def test_count_detections():
    maps = {
        "empty": _detmap((5, 5)),
        "three": _detmap((5, 5), detected=[(0, 0), (1, 1), (2, 2)]),
    }
    counts = count_detections(maps)
    assert counts == {"empty": 0, "three": 3}


def test_count_detections_permutation_invariant(rng):
    arr = rng.choice([-2, -1, 17000], size=(8, 8)).astype(np.int32)
    shuffled = arr.reshape(-1).copy()
    rng.shuffle(shuffled)
    a = count_detections({"m": arr})["m"]
    b = count_detections({"m": shuffled.reshape(8, 8)})["m"]
    assert a == b


def test_timing_differences():
    a = _detmap((3, 3), detected=[(0, 0), (1, 1)])
    b = _detmap((3, 3), detected=[(1, 1), (2, 2)])
    a[1, 1] = 17510
    diffs = timing_differences(a, b)
    assert list(diffs) == [10]


def test_alert_categories():
    arr = _detmap((2, 2), detected=[(0, 0)], unmodeled=[(1, 0)])
    cat = alert_categories(arr)
    assert cat[0, 0] == ALERT_DETECTED
    assert cat[0, 1] == ALERT_NONE
    assert cat[1, 0] == ALERT_UNMODELED


@pytest.mark.parametrize("suffix", ["ppm", "png"])
def test_render_decode_roundtrip_alerts(tmp_path, rng, suffix):
    arr = rng.choice([-2, -1, 17000], size=(9, 13)).astype(np.int32)
    path = render(arr, "alerts", tmp_path / f"img.{suffix}")
    recovered = decode(path, "alerts")
    assert np.array_equal(recovered, alert_categories(arr))


@pytest.mark.parametrize("suffix", ["ppm", "png"])
def test_render_decode_roundtrip_agreement(tmp_path, rng, suffix):
    cat = rng.integers(0, 4, (7, 5)).astype(np.uint8)
    path = render(cat, "agreement", tmp_path / f"img.{suffix}")
    assert np.array_equal(decode(path, "agreement"), cat)


def test_render_2x2_exact_colors(tmp_path):
    arr = np.array([[17000, NO_DETECTION], [UNMODELED, 17001]], dtype=np.int32)
    path = render(arr, "alerts", tmp_path / "img.ppm")
    raw = path.read_bytes()
    header, pixels = raw.split(b"255\n", 1)
    assert header == b"P6\n2 2\n"
    t = PALETTES["alerts"]
    expect = bytes(
        t[ALERT_DETECTED] + t[ALERT_NONE] + t[ALERT_UNMODELED] + t[ALERT_DETECTED]
    )
    assert pixels == expect


def test_render_empty_map_uniform(tmp_path):
    arr = _detmap((3, 3))
    path = render(arr, "alerts", tmp_path / "img.ppm")
    rgb = decode(path, "alerts")
    assert (rgb == ALERT_NONE).all()


def test_render_unknown_palette(tmp_path):
    with pytest.raises(ValueError, match="unknown palette"):
        render(_detmap((2, 2)), "viridis", tmp_path / "img.ppm")


def test_decode_rejects_foreign_colors(tmp_path):
    from budd.analyze import write_ppm

    rgb = np.full((2, 2, 3), 17, dtype=np.uint8)
    write_ppm(rgb, tmp_path / "img.ppm")
    with pytest.raises(CubeError, match="not in palette"):
        decode(tmp_path / "img.ppm", "alerts")


def test_comparison_map_roundtrip(tmp_path, rng):
    cat = rng.integers(0, 4, (6, 8)).astype(np.uint8)
    path = save_comparison_map(cat, tmp_path / "cmp.u8")
    assert np.array_equal(load_comparison_map(path), cat)


def test_counts_table_format():
    text = counts_table({"agree": 10, "a_only": 2}, title="t")
    lines = text.splitlines()
    assert lines[0] == "t"
    assert "agree" in lines[1] or "agree" in lines[2]
    assert text.endswith("\n")
