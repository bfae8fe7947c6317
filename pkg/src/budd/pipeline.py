"""Tile-parallel execution: split the AOI, run every stage per tile, merge.

Tiles are fully independent units of work (detrending statistics and the TV
solve are tile-local by design), so any worker count produces bit-identical
outputs: results are merged by tile coordinates, never by completion order.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date as Date
from pathlib import Path
from typing import Mapping

import numpy as np

from budd import _kernels
from budd.cube import (
    ForestMask,
    SceneCube,
    check_coregistered,
    filter_by_cloud,
    load_cube,
    load_forest_mask,
    restrict_period,
)
from budd.detector import Thresholds, run_tile, save_alerts, save_detection_map
from budd.errors import BuddError, PipelineError
from budd.model import (
    MODALITY_ORDER,
    ModelGrid,
    PeriodSplit,
    ShiftConfig,
    SigmaFloors,
    fit_tile,
    load_models,
    save_models,
)
from budd.preprocess import (
    apply_mask,
    derive_ndvi_cube,
    derive_ratio_cube,
    derive_coherence_cube,
    detrend,
)
from budd.tv import DenoiseParams, tv_denoise

log = logging.getLogger("budd.pipeline")

# Regularization weights sized well below each modality's typical noise
# scale: TV heavier than ~sigma/4 collapses the fitted variances and leaves
# temporally correlated residue that the Bayesian updater double-counts as
# independent evidence, inflating false confirmations.
DEFAULT_DENOISE = {
    "ndvi": DenoiseParams(lam=0.01),
    "ratio": DenoiseParams(lam=0.05),
    "coherence": DenoiseParams(lam=0.01),
}


@dataclass(frozen=True)
class Tile:
    index: int
    row0: int
    row1: int
    col0: int
    col1: int

    @property
    def tile_id(self) -> str:
        return f"t{self.index:04d}_r{self.row0}_c{self.col0}"


@dataclass
class PipelineConfig:
    """Everything the end-to-end run needs; JSON-overridable."""

    tile_size: int = 512
    resolution_m: float = 20.0
    cloud_max_fraction: float = 0.15
    percentile_level: float = 90.0
    min_forest_pixels: int = 100
    min_define_obs: int = 5
    denoise: dict[str, DenoiseParams] = field(
        default_factory=lambda: dict(DEFAULT_DENOISE)
    )
    shifts: ShiftConfig = ShiftConfig()
    sigma_min: SigmaFloors = SigmaFloors()
    thresholds: Thresholds = Thresholds()
    split: PeriodSplit = PeriodSplit()
    modality_subset: tuple[str, ...] = MODALITY_ORDER
    worker_count: int = 1
    apply_detrend: bool = True
    apply_denoise: bool = True
    denoise_before_detrend: bool = False
    coherence_window: int = 7
    ratio_in_db: bool = False

    def __post_init__(self):
        if self.tile_size < 32:
            raise ValueError(f"tile_size must be >= 32, got {self.tile_size}")
        if self.worker_count < 1:
            raise ValueError(f"worker_count must be >= 1, got {self.worker_count}")
        if not 0.0 <= self.cloud_max_fraction <= 1.0:
            raise ValueError("cloud_max_fraction outside [0, 1]")
        if not 0.0 < self.percentile_level <= 100.0:
            raise ValueError("percentile_level outside (0, 100]")
        bad = [m for m in self.modality_subset if m not in MODALITY_ORDER]
        if bad:
            raise ValueError(f"unknown modalities in subset: {bad}")
        if not self.modality_subset:
            raise ValueError("modality_subset may not be empty")


def config_from_dict(doc: Mapping) -> PipelineConfig:
    """Build a config from a JSON-style mapping (missing keys keep defaults)."""
    kwargs: dict = {}
    simple = (
        "tile_size", "resolution_m", "cloud_max_fraction", "percentile_level",
        "min_forest_pixels", "min_define_obs", "worker_count",
        "apply_detrend", "apply_denoise", "denoise_before_detrend",
        "coherence_window", "ratio_in_db",
    )
    for key in simple:
        if key in doc:
            kwargs[key] = doc[key]
    if "modality_subset" in doc:
        kwargs["modality_subset"] = tuple(doc["modality_subset"])
    if "denoise" in doc:
        kwargs["denoise"] = {
            name: DenoiseParams(**params) for name, params in doc["denoise"].items()
        }
    if "shifts" in doc:
        kwargs["shifts"] = ShiftConfig(**doc["shifts"])
    if "sigma_min" in doc:
        kwargs["sigma_min"] = SigmaFloors(**doc["sigma_min"])
    if "thresholds" in doc:
        kwargs["thresholds"] = Thresholds(**doc["thresholds"])
    if "split" in doc:
        kwargs["split"] = PeriodSplit(
            **{k: Date.fromisoformat(v) for k, v in doc["split"].items()}
        )
    return PipelineConfig(**kwargs)


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def plan_tiles(height: int, width: int, tile_size: int) -> list[Tile]:
    """Non-overlapping rectangles covering the raster exactly; edges shrink."""
    if height <= 0 or width <= 0:
        raise ValueError(f"dimensions must be positive, got {height}x{width}")
    tiles = []
    index = 0
    for r0 in range(0, height, tile_size):
        for c0 in range(0, width, tile_size):
            tiles.append(
                Tile(index, r0, min(r0 + tile_size, height), c0, min(c0 + tile_size, width))
            )
            index += 1
    return tiles


def load_input_cubes(cube_paths: Mapping[str, str | Path],
                     config: PipelineConfig) -> dict[str, SceneCube]:
    """Load cube directories and derive detector modalities from raw bands.

    Accepted keys: ndvi / ratio / coherence (used directly), red + nir
    (NDVI), vv + vh (ratio), slc_pairs (coherence via the windowed
    estimator).
    """
    raw: dict[str, SceneCube] = {}
    for name, path in cube_paths.items():
        if name == "slc_pairs":
            continue
        p = Path(path)
        raw[name] = load_cube(p / "manifest.json" if p.is_dir() else p)

    cubes: dict[str, SceneCube] = {}
    for name in MODALITY_ORDER:
        if name in raw:
            cubes[name] = raw[name]
    if "red" in raw or "nir" in raw:
        if not ("red" in raw and "nir" in raw):
            raise BuddError("NDVI derivation needs both red and nir cubes")
        if "ndvi" in cubes:
            raise BuddError("give either an ndvi cube or red+nir, not both")
        cubes["ndvi"] = derive_ndvi_cube(raw["red"], raw["nir"])
    if "vv" in raw or "vh" in raw:
        if not ("vv" in raw and "vh" in raw):
            raise BuddError("ratio derivation needs both vv and vh cubes")
        if "ratio" in cubes:
            raise BuddError("give either a ratio cube or vv+vh, not both")
        cubes["ratio"] = derive_ratio_cube(raw["vv"], raw["vh"], config.ratio_in_db)
    if "slc_pairs" in cube_paths:
        if "coherence" in cubes:
            raise BuddError("give either a coherence cube or slc_pairs, not both")
        cubes["coherence"] = derive_coherence_cube(
            cube_paths["slc_pairs"], config.coherence_window
        )

    unknown = [k for k in cube_paths if k not in
               set(MODALITY_ORDER) | {"red", "nir", "vv", "vh", "slc_pairs"}]
    if unknown:
        raise BuddError(f"unknown cube inputs: {unknown}")
    if cubes:
        check_coregistered(*cubes.values())
    return cubes


@dataclass
class TileResult:
    tile: Tile
    detection: np.ndarray
    alerts: list
    unmodeled: int
    dropped_scenes: dict[str, int]
    timings: dict[str, float]
    grid: ModelGrid | None = None


def _denoise_cube(cube: SceneCube, params: DenoiseParams) -> SceneCube:
    if len(cube) == 0:
        return cube
    volume = np.stack([p.astype(np.float64) for p in cube.pixels])
    valid = np.stack([cube.valid_mask(i) for i in range(len(cube))])
    out = tv_denoise(volume, params, valid)
    return SceneCube(
        modality=cube.modality,
        height=cube.height,
        width=cube.width,
        resolution_m=cube.resolution_m,
        scenes=list(cube.scenes),
        pixels=[np.ascontiguousarray(out[i], dtype=np.float32) for i in range(len(cube))],
        masks=list(cube.masks),
    )


def denoise_cube_tiled(cube: SceneCube, params: DenoiseParams,
                       tile_size: int = 512) -> SceneCube:
    """TV-denoise a whole-extent cube tile by tile (matching the pipeline's
    tile-local solves); used by staged preprocessing."""
    pixels = [p.copy() for p in cube.pixels]
    for tile in plan_tiles(cube.height, cube.width, tile_size):
        window = cube.window(tile.row0, tile.row1, tile.col0, tile.col1)
        solved = _denoise_cube(window, params)
        for i in range(len(cube)):
            pixels[i][tile.row0:tile.row1, tile.col0:tile.col1] = solved.pixels[i]
    return SceneCube(
        modality=cube.modality,
        height=cube.height,
        width=cube.width,
        resolution_m=cube.resolution_m,
        scenes=list(cube.scenes),
        pixels=pixels,
        masks=list(cube.masks),
    )


def _process_tile(tile: Tile, cubes: Mapping[str, SceneCube],
                  forest: ForestMask | None, config: PipelineConfig,
                  models: ModelGrid | None, want_detection: bool) -> TileResult:
    timings: dict[str, float] = {}
    dropped: dict[str, int] = {}

    def _timed(stage, fn, *args, **kwargs):
        begin = time.perf_counter()
        try:
            out = fn(*args, **kwargs)
        except BuddError as exc:
            raise PipelineError(tile.tile_id, stage, str(exc)) from exc
        except ValueError as exc:
            raise PipelineError(tile.tile_id, stage, str(exc)) from exc
        timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - begin
        return out

    local: dict[str, SceneCube] = {}
    for name in config.modality_subset:
        cube = cubes.get(name)
        if cube is None:
            continue
        local[name] = _timed("apply_mask", apply_mask,
                             cube.window(tile.row0, tile.row1, tile.col0, tile.col1))
    forest_local = (
        forest.window(tile.row0, tile.row1, tile.col0, tile.col1) if forest else None
    )

    def _detrend_all():
        for name in list(local):
            before = len(local[name])
            local[name] = _timed(
                "detrend", detrend, local[name], forest_local,
                config.percentile_level, config.min_forest_pixels,
            )
            if before != len(local[name]):
                dropped[name] = dropped.get(name, 0) + before - len(local[name])

    def _denoise_all():
        for name in list(local):
            params = config.denoise.get(name, DenoiseParams())
            local[name] = _timed("tv_denoise", _denoise_cube, local[name], params)

    if config.denoise_before_detrend:
        if config.apply_denoise:
            _denoise_all()
        if config.apply_detrend:
            _detrend_all()
    else:
        if config.apply_detrend:
            _detrend_all()
        if config.apply_denoise:
            _denoise_all()

    if models is not None:
        grid = models.window(tile.row0, tile.row1, tile.col0, tile.col1)
    else:
        define = {
            name: restrict_period(c, config.split.define_start, config.split.define_end)
            for name, c in local.items()
        }
        grid = _timed(
            "fit", fit_tile, define, config.split,
            config.shifts, config.sigma_min, config.min_define_obs,
        )

    if not want_detection:
        return TileResult(tile, np.zeros((0, 0), np.int32), [], 0, dropped, timings, grid)

    monitor = {
        name: restrict_period(c, config.split.monitor_start, config.split.monitor_end)
        for name, c in local.items()
    }
    detection, alerts = _timed(
        "detect", run_tile, grid, monitor, config.thresholds, config.modality_subset
    )
    alerts = [
        replace(a, row=a.row + tile.row0, col=a.col + tile.col0) for a in alerts
    ]
    unmodeled = grid.unmodeled_count(config.modality_subset)
    return TileResult(tile, detection, alerts, unmodeled, dropped, timings, grid)


def _run_tiles(tiles, worker, worker_count):
    if worker_count == 1:
        return [worker(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=worker_count) as pool:
        return list(pool.map(worker, tiles))


@dataclass
class RunResult:
    detection: np.ndarray
    alerts: list
    report: dict
    map_path: Path | None = None
    alerts_path: Path | None = None
    report_path: Path | None = None


def run_pipeline(config: PipelineConfig, cube_paths: Mapping[str, str | Path],
                 forest_mask_path: str | Path | None, out_dir: str | Path | None,
                 models_dir: str | Path | None = None) -> RunResult:
    """Full run: load, tile, preprocess, fit (or load models), detect, merge.

    Outputs are identical for any worker_count. When out_dir is None nothing
    is written and results are only returned.
    """
    wall_start = time.perf_counter()
    cubes = load_input_cubes(cube_paths, config)
    if not cubes:
        raise BuddError("no detector modality cubes among inputs")
    height = next(iter(cubes.values())).height
    width = next(iter(cubes.values())).width

    forest = None
    if forest_mask_path is not None:
        forest = load_forest_mask(forest_mask_path)
        if (forest.height, forest.width) != (height, width):
            raise BuddError(
                f"forest mask {forest.height}x{forest.width} does not match AOI {height}x{width}"
            )
    if config.apply_detrend and forest is None:
        raise BuddError("detrending requires a forest mask (or disable apply_detrend)")

    filtered: dict[str, SceneCube] = {}
    cloud_dropped: dict[str, int] = {}
    for name, cube in cubes.items():
        kept = filter_by_cloud(cube, config.cloud_max_fraction)
        if len(kept) != len(cube):
            cloud_dropped[name] = len(cube) - len(kept)
        filtered[name] = kept

    models = load_models(models_dir) if models_dir is not None else None
    if models is not None and (models.height, models.width) != (height, width):
        raise BuddError("model grid extent does not match AOI")

    tiles = plan_tiles(height, width, config.tile_size)
    results = _run_tiles(
        tiles,
        lambda t: _process_tile(t, filtered, forest, config, models, True),
        config.worker_count,
    )
    results.sort(key=lambda r: r.tile.index)

    detection = np.full((height, width), -1, dtype=np.int32)
    alerts = []
    unmodeled = 0
    dropped: dict[str, int] = {}
    timings: dict[str, float] = {}
    for res in results:
        t = res.tile
        detection[t.row0:t.row1, t.col0:t.col1] = res.detection
        alerts.extend(res.alerts)
        unmodeled += res.unmodeled
        for k, v in res.dropped_scenes.items():
            dropped[k] = dropped.get(k, 0) + v
        for k, v in res.timings.items():
            timings[k] = timings.get(k, 0.0) + v
    alerts.sort(key=lambda a: (a.row, a.col))

    report = {
        "aoi": {"height": height, "width": width},
        "tiles": len(tiles),
        "tile_size": config.tile_size,
        "worker_count": config.worker_count,
        "kernel_backend": _kernels.BACKEND,
        "modality_subset": list(config.modality_subset),
        "scenes_in": {name: len(c) for name, c in cubes.items()},
        "scenes_dropped_cloud": cloud_dropped,
        "scenes_dropped_detrend": dropped,
        "unmodeled_pixels": unmodeled,
        "alerts": len(alerts),
        "stage_seconds": {k: round(v, 3) for k, v in sorted(timings.items())},
        "wall_seconds": round(time.perf_counter() - wall_start, 3),
    }

    result = RunResult(detection=detection, alerts=alerts, report=report)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.map_path = save_detection_map(detection, out_dir / "detection.i32")
        result.alerts_path = save_alerts(alerts, out_dir / "alerts.jsonl")
        result.report_path = out_dir / "run_report.json"
        with open(result.report_path, "w") as fh:
            json.dump(report, fh, indent=1)
    log.info("pipeline done: %d alerts over %d tiles", len(alerts), len(tiles))
    return result


def fit_models(config: PipelineConfig, cube_paths: Mapping[str, str | Path],
               forest_mask_path: str | Path | None, out_dir: str | Path) -> Path:
    """Fit and save the model grid for the whole AOI (tile by tile)."""
    cubes = load_input_cubes(cube_paths, config)
    if not cubes:
        raise BuddError("no detector modality cubes among inputs")
    height = next(iter(cubes.values())).height
    width = next(iter(cubes.values())).width

    forest = None
    if forest_mask_path is not None:
        forest = load_forest_mask(forest_mask_path)
    if config.apply_detrend and forest is None:
        raise BuddError("detrending requires a forest mask (or disable apply_detrend)")

    filtered = {
        name: filter_by_cloud(cube, config.cloud_max_fraction)
        for name, cube in cubes.items()
    }

    tiles = plan_tiles(height, width, config.tile_size)
    merged = ModelGrid(height, width, config.min_define_obs)

    def fit_worker(tile: Tile):
        res = _process_tile(tile, filtered, forest, config, None, False)
        return tile, res.grid

    for tile, grid in _run_tiles(tiles, fit_worker, config.worker_count):
        for name, mm in grid.entries.items():
            if name not in merged.entries:
                merged.entries[name] = _empty_modality(height, width, mm)
            dst = merged.entries[name]
            sl = (slice(tile.row0, tile.row1), slice(tile.col0, tile.col1))
            dst.mu_f[sl] = mm.mu_f
            dst.sigma[sl] = mm.sigma
            dst.mu_nf[sl] = mm.mu_nf
            dst.n_obs[sl] = mm.n_obs

    return save_models(merged, out_dir)


def _empty_modality(height, width, like):
    from budd.model import ModalityModel

    return ModalityModel(
        mu_f=np.full((height, width), np.nan),
        sigma=np.full((height, width), np.nan),
        mu_nf=np.full((height, width), np.nan),
        n_obs=np.zeros((height, width), dtype=np.int32),
        shift=like.shift,
        sigma_min=like.sigma_min,
    )
