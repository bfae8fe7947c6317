"""Tiling, end-to-end composition, worker-count determinism."""
import json
from datetime import date as Date

import numpy as np
import pytest

from budd.cube import save_cube, save_forest_mask
from budd.detector import load_detection_map
from budd.errors import BuddError
from budd.model import PeriodSplit
from budd.pipeline import (
    PipelineConfig,
    config_from_dict,
    fit_models,
    load_input_cubes,
    plan_tiles,
    run_pipeline,
)
from budd.synth import ChangeEvent, ModalitySpec, ScenarioSpec, generate
from budd.tv import DenoiseParams


def test_plan_tiles_exact_quarters():
    tiles = plan_tiles(1024, 1024, 512)
    assert len(tiles) == 4
    assert all(t.row1 - t.row0 == 512 and t.col1 - t.col0 == 512 for t in tiles)


def test_plan_tiles_remainder():
    tiles = plan_tiles(600, 512, 512)
    assert [(t.row0, t.row1, t.col0, t.col1) for t in tiles] == [
        (0, 512, 0, 512),
        (512, 600, 0, 512),
    ]


def test_plan_tiles_cover_disjoint_oracle(rng):
    for _ in range(20):
        h = int(rng.integers(1, 300))
        w = int(rng.integers(1, 300))
        ts = int(rng.integers(32, 128))
        tiles = plan_tiles(h, w, ts)
        cover = np.zeros((h, w), dtype=np.int32)
        for t in tiles:
            cover[t.row0:t.row1, t.col0:t.col1] += 1
        assert (cover == 1).all()


def test_plan_tiles_rejects_empty():
    with pytest.raises(ValueError):
        plan_tiles(0, 10, 64)


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(tile_size=16)
    with pytest.raises(ValueError):
        PipelineConfig(worker_count=0)
    with pytest.raises(ValueError):
        PipelineConfig(modality_subset=("ndvi", "optical"))
    with pytest.raises(ValueError):
        PipelineConfig(modality_subset=())


def test_config_from_dict_roundtrip():
    doc = {
        "tile_size": 64,
        "worker_count": 3,
        "modality_subset": ["ratio", "coherence"],
        "denoise": {"ratio": {"lam": 0.07, "max_iters": 10}},
        "thresholds": {"flag": 0.7, "min_obs": 3},
        "split": {
            "define_start": "2015-01-01",
            "define_end": "2016-12-31",
            "monitor_start": "2017-01-01",
            "monitor_end": "2017-12-31",
        },
        "shifts": {"ratio": -5.0},
    }
    cfg = config_from_dict(doc)
    assert cfg.tile_size == 64
    assert cfg.worker_count == 3
    assert cfg.modality_subset == ("ratio", "coherence")
    assert cfg.denoise["ratio"] == DenoiseParams(lam=0.07, max_iters=10)
    assert cfg.thresholds.flag == 0.7 and cfg.thresholds.min_obs == 3
    assert cfg.split.define_end == Date(2016, 12, 31)
    assert cfg.shifts.ratio == -5.0 and cfg.shifts.ndvi == -6.0


def tiny_scenario(seed=11):
    spec = ScenarioSpec(
        height=48, width=48, seed=seed,
        define_start=Date(2015, 1, 1), define_end=Date(2015, 12, 31),
        monitor_start=Date(2016, 1, 1), monitor_end=Date(2016, 12, 31),
    )
    spec.modalities = {
        "ndvi": ModalitySpec(0.8, 0.05, 0.45, 0.07, revisit_days=20, cloud_loss=0.4),
        "ratio": ModalitySpec(6.0, 0.8, 2.5, 0.8, revisit_days=12),
        "coherence": ModalitySpec(0.25, 0.05, 0.65, 0.08, revisit_days=12),
    }
    spec.events = [ChangeEvent(10, 16, 10, 16, Date(2016, 5, 1))]
    return spec


@pytest.fixture(scope="module")
def scenario_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    spec = tiny_scenario()
    cubes, truth, forest = generate(spec)
    paths = {}
    for name, cube in cubes.items():
        save_cube(cube, out / name)
        paths[name] = out / name
    save_forest_mask(forest, out / "forest.u8")
    np.save(out / "truth.npy", truth)
    return out, paths, spec


def _config(**kw):
    base = dict(
        tile_size=32,
        split=PeriodSplit(Date(2015, 1, 1), Date(2015, 12, 31),
                          Date(2016, 1, 1), Date(2016, 12, 31)),
    )
    base.update(kw)
    return PipelineConfig(**base)


def test_pipeline_detects_event(scenario_dir, tmp_path):
    out_dir, paths, spec = scenario_dir
    res = run_pipeline(_config(), paths, out_dir / "forest.u8", tmp_path / "run")
    truth = np.load(out_dir / "truth.npy")
    detected = res.detection >= 0
    assert detected[10:16, 10:16].mean() > 0.9
    assert res.report["alerts"] == len(res.alerts)
    assert (tmp_path / "run" / "detection.i32").is_file()
    assert (tmp_path / "run" / "alerts.jsonl").is_file()
    report = json.loads((tmp_path / "run" / "run_report.json").read_text())
    assert report["tiles"] == 4
    assert set(report["stage_seconds"]) >= {"apply_mask", "detect", "detrend", "fit", "tv_denoise"}
    saved = load_detection_map(tmp_path / "run" / "detection.i32")
    assert np.array_equal(saved, res.detection)


def test_pipeline_deterministic_across_workers(scenario_dir, tmp_path):
    out_dir, paths, _ = scenario_dir
    outputs = {}
    for workers in (1, 2, 8):
        res = run_pipeline(
            _config(worker_count=workers), paths, out_dir / "forest.u8",
            tmp_path / f"w{workers}",
        )
        outputs[workers] = res
    bytes1 = (tmp_path / "w1" / "detection.i32").read_bytes()
    alerts1 = (tmp_path / "w1" / "alerts.jsonl").read_bytes()
    for workers in (2, 8):
        assert (tmp_path / f"w{workers}" / "detection.i32").read_bytes() == bytes1
        assert (tmp_path / f"w{workers}" / "alerts.jsonl").read_bytes() == alerts1


def test_pipeline_single_tile_equals_tiled_stages(scenario_dir, tmp_path):
    # 1-tile AOI equals calling the stages directly
    from budd.cube import load_cube, restrict_period
    from budd.detector import Thresholds, run_tile
    from budd.model import fit_tile
    from budd.pipeline import _denoise_cube, DEFAULT_DENOISE
    from budd.preprocess import apply_mask, detrend
    from budd.cube import load_forest_mask

    out_dir, paths, _ = scenario_dir
    cfg = _config(tile_size=48)
    res = run_pipeline(cfg, paths, out_dir / "forest.u8", None)

    forest = load_forest_mask(out_dir / "forest.u8")
    local = {}
    for name in ("ndvi", "ratio", "coherence"):
        cube = apply_mask(load_cube(paths[name] / "manifest.json"))
        cube = detrend(cube, forest, 90.0, 100)
        local[name] = _denoise_cube(cube, DEFAULT_DENOISE[name])
    grid = fit_tile(
        {n: restrict_period(c, cfg.split.define_start, cfg.split.define_end)
         for n, c in local.items()},
        cfg.split,
    )
    detection, alerts = run_tile(
        grid,
        {n: restrict_period(c, cfg.split.monitor_start, cfg.split.monitor_end)
         for n, c in local.items()},
        Thresholds(),
    )
    assert np.array_equal(detection, res.detection)
    assert alerts == res.alerts


def test_pipeline_subset_without_scenes(scenario_dir, tmp_path):
    out_dir, paths, _ = scenario_dir
    res = run_pipeline(
        _config(modality_subset=("ndvi",)),
        {"ndvi": paths["ndvi"]},
        out_dir / "forest.u8",
        None,
    )
    # optical-only still works; now drop the optical scenes entirely
    cfg = _config(modality_subset=("ndvi",),
                  split=PeriodSplit(Date(2015, 1, 1), Date(2015, 12, 31),
                                    Date(2017, 1, 1), Date(2017, 6, 1)))
    res2 = run_pipeline(cfg, {"ndvi": paths["ndvi"]}, out_dir / "forest.u8", None)
    assert len(res2.alerts) == 0
    assert res2.report["alerts"] == 0
    assert res2.report["scenes_in"]["ndvi"] > 0  # scenes exist, none monitorable


def test_tile_stage_error_carries_tile_and_stage(scenario_dir, tmp_path):
    from budd.cube import load_cube
    from budd.errors import PipelineError

    out_dir, paths, _ = scenario_dir
    # corrupt one ratio scene with a NaN at a valid pixel: the TV stage of
    # exactly one tile must abort the run, naming itself
    broken = tmp_path / "broken"
    cube = load_cube(paths["ratio"] / "manifest.json")
    cube.pixels[3][40, 40] = np.nan
    save_cube(cube, broken)
    bad_paths = dict(paths, ratio=broken)
    with pytest.raises(PipelineError, match=r"tile t\d+.*tv_denoise"):
        run_pipeline(_config(worker_count=2), bad_paths, out_dir / "forest.u8", None)


def test_pipeline_requires_forest_mask_for_detrend(scenario_dir):
    out_dir, paths, _ = scenario_dir
    with pytest.raises(BuddError, match="forest mask"):
        run_pipeline(_config(), paths, None, None)
    res = run_pipeline(_config(apply_detrend=False), paths, None, None)
    assert res.detection.shape == (48, 48)


def test_fit_models_then_detect(scenario_dir, tmp_path):
    out_dir, paths, _ = scenario_dir
    cfg = _config()
    models_path = fit_models(cfg, paths, out_dir / "forest.u8", tmp_path / "models")
    assert models_path.is_file()
    res = run_pipeline(cfg, paths, out_dir / "forest.u8", None,
                       models_dir=tmp_path / "models")
    # model grid reloaded from float32 rasters: detections still cover the event
    assert (res.detection[10:16, 10:16] >= 0).mean() > 0.9


def test_load_input_cubes_raw_bands(tmp_path, rng):
    # red+nir dirs derive an ndvi cube
    from conftest import make_cube

    red = make_cube(modality="red", height=8, width=8, n_scenes=4, seed=1)
    nir = make_cube(modality="nir", height=8, width=8, n_scenes=4, seed=2)
    save_cube(red, tmp_path / "red")
    save_cube(nir, tmp_path / "nir")
    cubes = load_input_cubes(
        {"red": tmp_path / "red", "nir": tmp_path / "nir"}, PipelineConfig()
    )
    assert set(cubes) == {"ndvi"}
    assert len(cubes["ndvi"]) == 4

    with pytest.raises(BuddError, match="unknown cube inputs"):
        load_input_cubes({"swir": tmp_path / "red"}, PipelineConfig())
    with pytest.raises(BuddError, match="both red and nir"):
        load_input_cubes({"red": tmp_path / "red"}, PipelineConfig())
