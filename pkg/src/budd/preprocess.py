"""Derived modalities, cloud masking, and per-tile seasonality detrending.

NDVI comes from red/NIR reflectances, the backscatter ratio from linear
VV/VH power, and coherence from windowed normalized cross-correlation of
complex acquisition pairs. Detrending subtracts each scene's 90th percentile
of valid forest-pixel values so the seasonal signal drops out.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from datetime import date as Date
from pathlib import Path

import numpy as np

from budd.cube import ForestMask, SceneCube, SceneMeta, check_coregistered
from budd.errors import CubeError

log = logging.getLogger("budd.preprocess")

NDVI_EPS = 1e-6
RATIO_EPS = 1e-10
COHERENCE_EPS = 1e-12


@dataclass(frozen=True)
class ComplexScenePair:
    """Two co-registered complex acquisitions from the same orbital track."""

    scene_a: np.ndarray  # complex64 (H, W)
    scene_b: np.ndarray
    date_a: Date
    date_b: Date
    pass_: str | None = None
    relative_orbit: int | None = None

    def __post_init__(self):
        if self.scene_a.shape != self.scene_b.shape:
            raise CubeError(
                f"pair shapes differ: {self.scene_a.shape} vs {self.scene_b.shape}"
            )
        if not self.date_a < self.date_b:
            raise CubeError(f"pair dates not ordered: {self.date_a} >= {self.date_b}")


def compute_ndvi(red: np.ndarray, nir: np.ndarray):
    """(nir - red) / (nir + red) with tiny denominators marked invalid.

    Returns (values float32, valid bool). Valid outputs lie in [-1, 1].
    """
    if red.shape != nir.shape:
        raise CubeError(f"red shape {red.shape} != nir shape {nir.shape}")
    r = red.astype(np.float64)
    n = nir.astype(np.float64)
    denom = n + r
    valid = denom > NDVI_EPS
    out = np.zeros(red.shape, dtype=np.float64)
    np.divide(n - r, denom, out=out, where=valid)
    return out.astype(np.float32), valid


def compute_ratio(vv: np.ndarray, vh: np.ndarray, in_db: bool = False):
    """VV/VH band ratio in linear power; optional dB conversion.

    The denominator is guarded at RATIO_EPS and pixels at or below the guard
    are marked invalid. Returns (values float32, valid bool).
    """
    if vv.shape != vh.shape:
        raise CubeError(f"vv shape {vv.shape} != vh shape {vh.shape}")
    num = vv.astype(np.float64)
    den = np.maximum(vh.astype(np.float64), RATIO_EPS)
    valid = vh.astype(np.float64) > RATIO_EPS
    out = num / den
    if in_db:
        pos = out > 0
        db = np.zeros_like(out)
        np.log10(out, out=db, where=pos)
        out = 10.0 * db
        valid &= pos
    return out.astype(np.float32), valid


def _window_sum(plane: np.ndarray, half: int, axis: int) -> np.ndarray:
    """Clamped sliding-window sum along one axis (shrinks at borders)."""
    n = plane.shape[axis]
    csum = np.cumsum(plane, axis=axis, dtype=np.float64)
    pad_shape = list(plane.shape)
    pad_shape[axis] = 1
    csum = np.concatenate([np.zeros(pad_shape), csum], axis=axis)
    hi = np.minimum(np.arange(n) + half + 1, n)
    lo = np.maximum(np.arange(n) - half, 0)
    return np.take(csum, hi, axis=axis) - np.take(csum, lo, axis=axis)


def _box_sum(plane: np.ndarray, half: int) -> np.ndarray:
    return _window_sum(_window_sum(plane, half, 0), half, 1)


def compute_coherence(pair: ComplexScenePair, window: int = 7):
    """Windowed coherence magnitude |sum(a*conj(b))| / sqrt(sum|a|^2 sum|b|^2).

    The window is clamped at raster borders (it shrinks rather than
    mirroring). Output is clipped to [0, 1]; pixels where either power sum
    falls at or below COHERENCE_EPS are invalid. Returns (gamma float32,
    valid bool).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    half = window // 2
    a = pair.scene_a.astype(np.complex128)
    b = pair.scene_b.astype(np.complex128)
    cross = a * np.conj(b)
    num_re = _box_sum(cross.real, half)
    num_im = _box_sum(cross.imag, half)
    pa = _box_sum((a.real * a.real + a.imag * a.imag), half)
    pb = _box_sum((b.real * b.real + b.imag * b.imag), half)
    valid = (pa > COHERENCE_EPS) & (pb > COHERENCE_EPS)
    denom = np.sqrt(pa * pb)
    gamma = np.zeros(a.shape, dtype=np.float64)
    np.divide(np.hypot(num_re, num_im), denom, out=gamma, where=valid)
    np.clip(gamma, 0.0, 1.0, out=gamma)
    return gamma.astype(np.float32), valid


def apply_mask(cube: SceneCube) -> SceneCube:
    """Materialize every scene's validity mask (absent masks become all-valid).

    Pixel values under invalid bits are left untouched; downstream
    statistics honor the masks.
    """
    masks = []
    for i in range(len(cube)):
        m = cube.masks[i]
        masks.append(cube.valid_mask(i).copy() if m is None else m)
    return SceneCube(
        modality=cube.modality,
        height=cube.height,
        width=cube.width,
        resolution_m=cube.resolution_m,
        scenes=list(cube.scenes),
        pixels=list(cube.pixels),
        masks=masks,
    )


def forest_percentile(values: np.ndarray, level: float) -> float:
    """Percentile with linear interpolation between closest ranks."""
    return float(np.percentile(values.astype(np.float64), level, method="linear"))


def detrend(cube: SceneCube, forest_mask: ForestMask, level: float = 90.0,
            min_forest_pixels: int = 100) -> SceneCube:
    """Subtract each scene's forest-pixel percentile from its valid pixels.

    Scenes with fewer than min_forest_pixels valid forest pixels are dropped
    with a warning. After detrending, the percentile of the remaining valid
    forest pixels is zero (within float32 rounding).
    """
    if (forest_mask.height, forest_mask.width) != (cube.height, cube.width):
        raise CubeError(
            f"forest mask {forest_mask.height}x{forest_mask.width} does not match cube"
        )
    forest = forest_mask.forest()
    scenes, pixels, masks = [], [], []
    for i, meta in enumerate(cube.scenes):
        valid = cube.valid_mask(i)
        sel = forest & valid & np.isfinite(cube.pixels[i])
        count = int(sel.sum())
        if count < min_forest_pixels:
            log.warning(
                "%s scene %s dropped: %d valid forest pixels < %d",
                cube.modality, meta.date, count, min_forest_pixels,
            )
            continue
        p = forest_percentile(cube.pixels[i][sel], level)
        shifted = np.where(valid, cube.pixels[i] - np.float32(p), cube.pixels[i])
        scenes.append(meta)
        pixels.append(shifted.astype(np.float32))
        masks.append(cube.masks[i])
    return SceneCube(
        modality=cube.modality,
        height=cube.height,
        width=cube.width,
        resolution_m=cube.resolution_m,
        scenes=scenes,
        pixels=pixels,
        masks=masks,
    )


def detrend_tiled(cube: SceneCube, forest_mask: ForestMask, level: float = 90.0,
                  min_forest_pixels: int = 100, tile_size: int = 512) -> SceneCube:
    """Per-tile detrending over a whole scene extent.

    Matches what the tiled pipeline does within each tile, but keeps one
    scene list: where a tile has too few valid forest pixels, that tile's
    pixels are masked invalid for the scene instead of dropping the scene.
    """
    if (forest_mask.height, forest_mask.width) != (cube.height, cube.width):
        raise CubeError(
            f"forest mask {forest_mask.height}x{forest_mask.width} does not match cube"
        )
    forest = forest_mask.forest()
    pixels, masks = [], []
    for i in range(len(cube)):
        valid = cube.valid_mask(i).copy()
        shifted = cube.pixels[i].copy()
        for r0 in range(0, cube.height, tile_size):
            for c0 in range(0, cube.width, tile_size):
                window = (slice(r0, min(r0 + tile_size, cube.height)),
                          slice(c0, min(c0 + tile_size, cube.width)))
                tile_valid = valid[window]
                sel = forest[window] & tile_valid & np.isfinite(shifted[window])
                if int(sel.sum()) < min_forest_pixels:
                    log.warning(
                        "%s scene %s tile (%d,%d) masked: %d valid forest pixels < %d",
                        cube.modality, cube.scenes[i].date, r0, c0,
                        int(sel.sum()), min_forest_pixels,
                    )
                    tile_valid[...] = False
                    continue
                p = forest_percentile(shifted[window][sel], level)
                block = shifted[window]
                block[tile_valid] = block[tile_valid] - np.float32(p)
        pixels.append(shifted)
        masks.append(valid)
    return SceneCube(
        modality=cube.modality,
        height=cube.height,
        width=cube.width,
        resolution_m=cube.resolution_m,
        scenes=list(cube.scenes),
        pixels=pixels,
        masks=masks,
    )


def _match_scenes(a: SceneCube, b: SceneCube):
    """Indices of scenes sharing (date, pass, orbit) in both cubes."""
    index_b = {s.track_key: i for i, s in enumerate(b.scenes)}
    pairs = []
    for i, s in enumerate(a.scenes):
        j = index_b.get(s.track_key)
        if j is not None:
            pairs.append((i, j))
    return pairs


def _derive_two_band(a: SceneCube, b: SceneCube, modality: str, op) -> SceneCube:
    check_coregistered(a, b)
    scenes, pixels, masks = [], [], []
    for i, j in _match_scenes(a, b):
        values, valid = op(a.pixels[i], b.pixels[j])
        valid &= a.valid_mask(i) & b.valid_mask(j)
        meta = a.scenes[i]
        cloud = meta.cloud_fraction
        if cloud is None:
            cloud = b.scenes[j].cloud_fraction
        scenes.append(
            SceneMeta(
                date=meta.date,
                pass_=meta.pass_,
                relative_orbit=meta.relative_orbit,
                cloud_fraction=cloud,
                data_path="",
            )
        )
        pixels.append(values)
        masks.append(valid)
    return SceneCube(
        modality=modality,
        height=a.height,
        width=a.width,
        resolution_m=a.resolution_m,
        scenes=scenes,
        pixels=pixels,
        masks=masks,
    )


def derive_ndvi_cube(red: SceneCube, nir: SceneCube) -> SceneCube:
    """NDVI cube from matched red/NIR scenes (intersection by track key)."""
    return _derive_two_band(nir, red, "ndvi", lambda n, r: compute_ndvi(r, n))


def derive_ratio_cube(vv: SceneCube, vh: SceneCube, in_db: bool = False) -> SceneCube:
    """VV/VH ratio cube from matched scenes."""
    return _derive_two_band(vv, vh, "ratio", lambda v, h: compute_ratio(v, h, in_db))


def load_slc_pairs(manifest_path: str | Path):
    """Read complex scene pairs: interleaved (re, im) float32 LE rasters.

    The manifest lists pair entries with both acquisition dates and track
    metadata. Returns (pairs, height, width, resolution_m).
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "pairs.json"
    if not manifest_path.is_file():
        raise CubeError(f"missing pairs manifest {manifest_path}")
    with open(manifest_path) as fh:
        doc = json.load(fh)
    height, width = int(doc["height"]), int(doc["width"])
    root = manifest_path.parent

    def _read_complex(rel: str) -> np.ndarray:
        path = root / rel
        expected = height * width * 8
        if not path.is_file():
            raise CubeError(f"missing SLC raster {path}")
        if path.stat().st_size != expected:
            raise CubeError(f"{path}: expected {expected} bytes, got {path.stat().st_size}")
        raw = np.fromfile(path, dtype="<f4").reshape(height, width, 2)
        return (raw[..., 0] + 1j * raw[..., 1]).astype(np.complex64)

    pairs = []
    for entry in doc["pairs"]:
        pairs.append(
            ComplexScenePair(
                scene_a=_read_complex(entry["data_a"]),
                scene_b=_read_complex(entry["data_b"]),
                date_a=Date.fromisoformat(entry["date_a"]),
                date_b=Date.fromisoformat(entry["date_b"]),
                pass_=entry.get("pass"),
                relative_orbit=entry.get("relative_orbit"),
            )
        )
    return pairs, height, width, float(doc["resolution_m"])


def save_slc_pairs(pairs, height: int, width: int, resolution_m: float,
                   out_dir: str | Path) -> Path:
    """Inverse of load_slc_pairs; used by tests and data preparation."""
    out_dir = Path(out_dir)
    (out_dir / "slc").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, pair in enumerate(pairs, start=1):
        rel_a, rel_b = f"slc/{k:04d}a.c64", f"slc/{k:04d}b.c64"
        for rel, scene in ((rel_a, pair.scene_a), (rel_b, pair.scene_b)):
            stacked = np.stack(
                [scene.real.astype("<f4"), scene.imag.astype("<f4")], axis=-1
            )
            stacked.tofile(out_dir / rel)
        entries.append(
            {
                "date_a": pair.date_a.isoformat(),
                "date_b": pair.date_b.isoformat(),
                "pass": pair.pass_,
                "relative_orbit": pair.relative_orbit,
                "data_a": rel_a,
                "data_b": rel_b,
            }
        )
    manifest = {
        "version": 1,
        "height": height,
        "width": width,
        "resolution_m": resolution_m,
        "pairs": entries,
    }
    path = out_dir / "pairs.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def derive_coherence_cube(manifest_path: str | Path, window: int = 7) -> SceneCube:
    """Coherence cube from an SLC pairs directory; scene date is the later
    acquisition of each pair."""
    pairs, height, width, resolution_m = load_slc_pairs(manifest_path)
    scenes, pixels, masks = [], [], []
    for pair in pairs:
        if pair.scene_a.shape != (height, width):
            raise CubeError("pair raster does not match manifest dimensions")
        gamma, valid = compute_coherence(pair, window)
        scenes.append(
            SceneMeta(
                date=pair.date_b,
                pass_=pair.pass_,
                relative_orbit=pair.relative_orbit,
                cloud_fraction=None,
                data_path="",
            )
        )
        pixels.append(gamma)
        masks.append(valid)
    return SceneCube(
        modality="coherence",
        height=height,
        width=width,
        resolution_m=resolution_m,
        scenes=scenes,
        pixels=pixels,
        masks=masks,
    )
