"""Per-pixel forest Gaussians and the mean-shifted non-forest counterparts.

Each pixel/modality gets a Gaussian fitted over the defining period: mean =
median of the valid observations, sigma = population standard deviation
(floored). The non-forest mean is the forest mean shifted by a configured
number of standard deviations; variances are shared.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import date as Date
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from budd import _kernels
from budd.cube import SceneCube, check_coregistered
from budd.errors import CubeError

log = logging.getLogger("budd.model")

# Canonical fusion/fit order for the detector modalities.
MODALITY_ORDER = ("ndvi", "ratio", "coherence")

MODEL_VERSION = 1


@dataclass(frozen=True)
class PeriodSplit:
    """Forest defining period vs monitoring period."""

    define_start: Date = Date(2015, 1, 1)
    define_end: Date = Date(2017, 12, 31)
    monitor_start: Date = Date(2018, 1, 1)
    monitor_end: Date = Date(2019, 12, 31)

    def __post_init__(self):
        if not (self.define_start < self.define_end < self.monitor_start <= self.monitor_end):
            raise ValueError(
                "period split must satisfy define_start < define_end < "
                f"monitor_start <= monitor_end, got {self}"
            )


@dataclass(frozen=True)
class ShiftConfig:
    """Non-forest mean shift per modality, in standard deviations."""

    ndvi: float = -6.0
    ratio: float = -6.0
    coherence: float = 7.0

    def shift(self, modality: str) -> float:
        return getattr(self, modality)


@dataclass(frozen=True)
class SigmaFloors:
    """Lower bounds on the fitted standard deviation, per modality."""

    ndvi: float = 0.02
    ratio: float = 0.05
    coherence: float = 0.02

    def floor(self, modality: str) -> float:
        return getattr(self, modality)


@dataclass(frozen=True)
class ModelEntry:
    """Fitted parameters for one pixel and one modality."""

    mu_f: float
    sigma: float
    mu_nf: float
    n_obs: int


def fit_pixel(values: Sequence[float], shift: float, sigma_min: float,
              min_obs: int = 5) -> ModelEntry | None:
    """Fit one pixel's forest Gaussian from its defining-period values.

    Returns None (pixel unmodeled) when fewer than min_obs observations are
    available. Values must be finite. The standard deviation is the
    population one, floored at sigma_min.
    """
    if sigma_min <= 0:
        raise ValueError(f"sigma_min must be > 0, got {sigma_min}")
    sample = [float(v) for v in values]
    c = len(sample)
    if c < min_obs:
        return None
    srt = sorted(sample)
    h = c >> 1
    if c & 1:
        med = srt[h]
    else:
        med = (srt[h - 1] + srt[h]) / 2.0
    total = 0.0
    for v in sample:
        total += v
    mean = total / c
    acc = 0.0
    for v in sample:
        d = v - mean
        acc += d * d
    sd = math.sqrt(acc / c)
    if sd < sigma_min:
        sd = sigma_min
    return ModelEntry(mu_f=med, sigma=sd, mu_nf=med + shift * sd, n_obs=c)


@dataclass
class ModalityModel:
    """Fitted model rasters for one modality (NaN where unmodeled)."""

    mu_f: np.ndarray  # float64 (H, W)
    sigma: np.ndarray
    mu_nf: np.ndarray
    n_obs: np.ndarray  # int32 (H, W)
    shift: float
    sigma_min: float

    def modeled(self, min_obs: int) -> np.ndarray:
        return self.n_obs >= min_obs


@dataclass
class ModelGrid:
    """Per-pixel models for every fitted modality of one raster extent."""

    height: int
    width: int
    min_obs: int
    entries: dict[str, ModalityModel] = field(default_factory=dict)

    def entry_at(self, modality: str, row: int, col: int) -> ModelEntry | None:
        """Scalar view of one pixel; None when absent or unmodeled."""
        mm = self.entries.get(modality)
        if mm is None or mm.n_obs[row, col] < self.min_obs:
            return None
        return ModelEntry(
            mu_f=float(mm.mu_f[row, col]),
            sigma=float(mm.sigma[row, col]),
            mu_nf=float(mm.mu_nf[row, col]),
            n_obs=int(mm.n_obs[row, col]),
        )

    def pixel_models(self, row: int, col: int) -> dict[str, ModelEntry]:
        out = {}
        for m in self.entries:
            entry = self.entry_at(m, row, col)
            if entry is not None:
                out[m] = entry
        return out

    def window(self, r0: int, r1: int, c0: int, c1: int) -> "ModelGrid":
        sub = ModelGrid(r1 - r0, c1 - c0, self.min_obs)
        for name, mm in self.entries.items():
            sub.entries[name] = ModalityModel(
                mu_f=np.ascontiguousarray(mm.mu_f[r0:r1, c0:c1]),
                sigma=np.ascontiguousarray(mm.sigma[r0:r1, c0:c1]),
                mu_nf=np.ascontiguousarray(mm.mu_nf[r0:r1, c0:c1]),
                n_obs=np.ascontiguousarray(mm.n_obs[r0:r1, c0:c1]),
                shift=mm.shift,
                sigma_min=mm.sigma_min,
            )
        return sub

    def unmodeled_count(self, subset: Sequence[str] | None = None) -> int:
        """Pixels with no modeled modality among the given subset."""
        names = [m for m in (subset or self.entries) if m in self.entries]
        if not names:
            return self.height * self.width
        any_mod = np.zeros((self.height, self.width), dtype=bool)
        for m in names:
            any_mod |= self.entries[m].modeled(self.min_obs)
        return int((~any_mod).sum())


def _stack_period(cube: SceneCube, start: Date, end: Date):
    """(T, N) float32 values and uint8 validity for scenes inside a period."""
    idx = [i for i, s in enumerate(cube.scenes) if start <= s.date <= end]
    n = cube.height * cube.width
    if not idx:
        return np.zeros((0, n), np.float32), np.zeros((0, n), np.uint8), idx
    values = np.stack([cube.pixels[i].reshape(-1) for i in idx]).astype(np.float32)
    valid = np.stack([cube.valid_mask(i).reshape(-1) for i in idx]).astype(np.uint8)
    # Non-finite samples never reach the kernels.
    valid &= np.isfinite(values)
    return np.ascontiguousarray(values), np.ascontiguousarray(valid), idx


def fit_tile(cubes: Mapping[str, SceneCube], split: PeriodSplit,
             shifts: ShiftConfig = ShiftConfig(),
             sigma_min: SigmaFloors = SigmaFloors(),
             min_obs: int = 5) -> ModelGrid:
    """Fit per-pixel models for every modality present in ``cubes``.

    Equivalent to running fit_pixel on each pixel's valid defining-period
    series; modalities absent from the input yield absent entries.
    """
    named = [cubes[m] for m in MODALITY_ORDER if m in cubes]
    if not named:
        raise ValueError("no detector modalities among inputs")
    check_coregistered(*named)
    height, width = named[0].height, named[0].width

    grid = ModelGrid(height, width, min_obs)
    for name in MODALITY_ORDER:
        if name not in cubes:
            continue
        cube = cubes[name]
        values, valid, _ = _stack_period(cube, split.define_start, split.define_end)
        mu, sg, counts = _kernels.fit_pixels(values, valid, float(sigma_min.floor(name)), int(min_obs))
        shift = shifts.shift(name)
        mu_nf = mu + shift * sg
        grid.entries[name] = ModalityModel(
            mu_f=mu.reshape(height, width),
            sigma=sg.reshape(height, width),
            mu_nf=mu_nf.reshape(height, width),
            n_obs=counts.reshape(height, width),
            shift=shift,
            sigma_min=sigma_min.floor(name),
        )
    return grid


def summarize_define_period(cubes: Mapping[str, SceneCube],
                            split: PeriodSplit | None = None) -> dict[str, dict[str, float]]:
    """Per-modality stats of valid-observation counts per pixel."""
    out = {}
    for name, cube in cubes.items():
        if split is None:
            idx = range(len(cube))
        else:
            idx = [i for i, s in enumerate(cube.scenes)
                   if split.define_start <= s.date <= split.define_end]
        counts = np.zeros((cube.height, cube.width), dtype=np.int64)
        for i in idx:
            counts += cube.valid_mask(i)
        out[name] = {
            "mean": float(counts.mean()),
            "std": float(counts.std()),
            "min": int(counts.min()),
            "max": int(counts.max()),
        }
    return out


def save_models(grid: ModelGrid, out_dir: str | Path) -> Path:
    """Write model rasters: three f32 + one u16 per modality, JSON header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "version": MODEL_VERSION,
        "height": grid.height,
        "width": grid.width,
        "min_obs": grid.min_obs,
        "modalities": {},
    }
    for name, mm in grid.entries.items():
        if int(mm.n_obs.max(initial=0)) > 0xFFFF:
            raise CubeError(f"{name}: observation count exceeds uint16 range")
        files = {
            "mu_f": f"{name}_mu_f.f32",
            "sigma": f"{name}_sigma.f32",
            "mu_nf": f"{name}_mu_nf.f32",
            "n_obs": f"{name}_n_obs.u16",
        }
        mm.mu_f.astype("<f4").tofile(out_dir / files["mu_f"])
        mm.sigma.astype("<f4").tofile(out_dir / files["sigma"])
        mm.mu_nf.astype("<f4").tofile(out_dir / files["mu_nf"])
        mm.n_obs.astype("<u2").tofile(out_dir / files["n_obs"])
        header["modalities"][name] = {
            "shift": mm.shift,
            "sigma_min": mm.sigma_min,
            "files": files,
        }
    path = out_dir / "models.json"
    with open(path, "w") as fh:
        json.dump(header, fh, indent=1)
    return path


def load_models(path: str | Path) -> ModelGrid:
    """Inverse of save_models (parameters come back float32-rounded)."""
    path = Path(path)
    if path.is_dir():
        path = path / "models.json"
    if not path.is_file():
        raise CubeError(f"missing model header {path}")
    with open(path) as fh:
        header = json.load(fh)
    if header.get("version") != MODEL_VERSION:
        raise CubeError(f"unsupported model version {header.get('version')!r}")
    height, width = int(header["height"]), int(header["width"])
    root = path.parent
    grid = ModelGrid(height, width, int(header["min_obs"]))
    for name, info in header["modalities"].items():
        files = info["files"]

        def _load(rel, dtype):
            raw = np.fromfile(root / rel, dtype=dtype)
            if raw.size != height * width:
                raise CubeError(f"{rel}: wrong raster size")
            return raw.reshape(height, width)

        grid.entries[name] = ModalityModel(
            mu_f=_load(files["mu_f"], "<f4").astype(np.float64),
            sigma=_load(files["sigma"], "<f4").astype(np.float64),
            mu_nf=_load(files["mu_nf"], "<f4").astype(np.float64),
            n_obs=_load(files["n_obs"], "<u2").astype(np.int32),
            shift=float(info["shift"]),
            sigma_min=float(info["sigma_min"]),
        )
    return grid
