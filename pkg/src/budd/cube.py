"""Scene-cube storage: a JSON manifest plus one raw binary raster per scene.

A cube directory holds a single modality's co-registered time series:

    manifest.json       scene list with dates, pass/orbit and cloud metadata
    scenes/0001.f32     H*W float32 little-endian, row-major, no header
    masks/0001.u8       H*W bytes, 0 = invalid, 1 = valid (optional per scene)

Masks are explicit files rather than sentinel values so that 0.0 stays a
legal measurement. All loads validate file sizes before reading pixels.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import date as Date
from pathlib import Path

import numpy as np

from budd.errors import CubeError

log = logging.getLogger("budd.cube")

MANIFEST_VERSION = 1
MODALITIES = ("ndvi", "ratio", "coherence", "red", "nir", "vv", "vh", "slc_pair")
OPTICAL_MODALITIES = frozenset({"ndvi", "red", "nir"})
PASSES = ("ascending", "descending")


@dataclass(frozen=True)
class SceneMeta:
    """Per-scene metadata; scenes are ordered by (date, pass, orbit)."""

    date: Date
    pass_: str | None = None
    relative_orbit: int | None = None
    cloud_fraction: float | None = None
    data_path: str = ""
    mask_path: str | None = None

    def __post_init__(self):
        if self.pass_ is not None and self.pass_ not in PASSES:
            raise CubeError(f"unknown pass {self.pass_!r}")
        if self.relative_orbit is not None and self.relative_orbit < 0:
            raise CubeError(f"relative_orbit must be >= 0, got {self.relative_orbit}")
        if self.cloud_fraction is not None and not 0.0 <= self.cloud_fraction <= 1.0:
            raise CubeError(f"cloud_fraction {self.cloud_fraction} outside [0, 1]")

    @property
    def sort_key(self) -> tuple:
        return (
            self.date,
            self.pass_ or "",
            self.relative_orbit if self.relative_orbit is not None else -1,
        )

    @property
    def track_key(self) -> tuple:
        """Identity used to detect duplicate acquisitions."""
        return (self.date, self.pass_, self.relative_orbit)


@dataclass
class SceneCube:
    """One modality's scene stack with per-scene validity masks.

    ``pixels[i]`` is a float32 (height, width) array; ``masks[i]`` is a bool
    array of the same shape or None meaning all-valid. Invalid pixels are
    ignored by every downstream statistic but their values are preserved.
    """

    modality: str
    height: int
    width: int
    resolution_m: float
    scenes: list[SceneMeta] = field(default_factory=list)
    pixels: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise CubeError(f"unknown modality {self.modality!r}")
        if len(self.pixels) != len(self.scenes) or len(self.masks) != len(self.scenes):
            raise CubeError("scenes, pixels and masks must have equal length")
        for arr in self.pixels:
            if arr.shape != (self.height, self.width):
                raise CubeError(
                    f"scene shape {arr.shape} != cube shape {(self.height, self.width)}"
                )
        for m in self.masks:
            if m is not None and m.shape != (self.height, self.width):
                raise CubeError("mask shape does not match cube shape")

    def __len__(self) -> int:
        return len(self.scenes)

    @property
    def is_optical(self) -> bool:
        return self.modality in OPTICAL_MODALITIES

    def valid_mask(self, i: int) -> np.ndarray:
        """Validity of scene i as a bool array (all-valid when mask absent)."""
        m = self.masks[i]
        if m is None:
            return np.ones((self.height, self.width), dtype=bool)
        return m

    def subset(self, indices: list[int]) -> "SceneCube":
        """New cube holding the selected scenes (shared pixel arrays)."""
        return SceneCube(
            modality=self.modality,
            height=self.height,
            width=self.width,
            resolution_m=self.resolution_m,
            scenes=[self.scenes[i] for i in indices],
            pixels=[self.pixels[i] for i in indices],
            masks=[self.masks[i] for i in indices],
        )

    def window(self, r0: int, r1: int, c0: int, c1: int) -> "SceneCube":
        """Spatial crop; pixel arrays are copies so tiles stay independent."""
        return SceneCube(
            modality=self.modality,
            height=r1 - r0,
            width=c1 - c0,
            resolution_m=self.resolution_m,
            scenes=list(self.scenes),
            pixels=[np.ascontiguousarray(p[r0:r1, c0:c1]) for p in self.pixels],
            masks=[
                None if m is None else np.ascontiguousarray(m[r0:r1, c0:c1])
                for m in self.masks
            ],
        )


@dataclass
class ForestMask:
    """Forest/nonforest/unknown map used for detrending statistics."""

    height: int
    width: int
    cells: np.ndarray  # uint8: 0 = nonforest, 1 = forest, 2 = unknown

    NONFOREST = 0
    FOREST = 1
    UNKNOWN = 2

    def __post_init__(self):
        if self.cells.shape != (self.height, self.width):
            raise CubeError("forest mask cells shape mismatch")
        bad = ~np.isin(self.cells, (0, 1, 2))
        if bad.any():
            raise CubeError("forest mask contains values outside {0, 1, 2}")

    def forest(self) -> np.ndarray:
        return self.cells == self.FOREST

    def window(self, r0: int, r1: int, c0: int, c1: int) -> "ForestMask":
        return ForestMask(r1 - r0, c1 - c0, np.ascontiguousarray(self.cells[r0:r1, c0:c1]))


def _read_raster(path: Path, height: int, width: int, dtype: str) -> np.ndarray:
    expected = height * width * np.dtype(dtype).itemsize
    if not path.is_file():
        raise CubeError(f"missing raster file {path}")
    actual = path.stat().st_size
    if actual != expected:
        raise CubeError(f"{path}: expected {expected} bytes for {height}x{width}, got {actual}")
    return np.fromfile(path, dtype=dtype).reshape(height, width)


def load_cube(manifest_path: str | Path) -> SceneCube:
    """Load a cube directory; scenes come back sorted by (date, pass, orbit).

    Duplicate (date, pass, orbit) scenes are a hard error: there is no
    defined way to merge two acquisitions with the same identity.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise CubeError(f"missing manifest {manifest_path}")
    with open(manifest_path) as fh:
        doc = json.load(fh)
    if doc.get("version") != MANIFEST_VERSION:
        raise CubeError(f"unsupported manifest version {doc.get('version')!r}")
    height, width = int(doc["height"]), int(doc["width"])
    if height <= 0 or width <= 0:
        raise CubeError("cube dimensions must be positive")
    root = manifest_path.parent

    scenes = []
    for entry in doc["scenes"]:
        try:
            when = Date.fromisoformat(entry["date"])
        except ValueError as exc:
            raise CubeError(f"bad scene date {entry.get('date')!r}") from exc
        scenes.append(
            SceneMeta(
                date=when,
                pass_=entry.get("pass"),
                relative_orbit=entry.get("relative_orbit"),
                cloud_fraction=entry.get("cloud_fraction"),
                data_path=entry["data"],
                mask_path=entry.get("mask"),
            )
        )

    order = sorted(range(len(scenes)), key=lambda i: scenes[i].sort_key)
    scenes = [scenes[i] for i in order]
    for prev, cur in zip(scenes, scenes[1:]):
        if prev.track_key == cur.track_key:
            raise CubeError(f"duplicate scene (date={cur.date}, pass={cur.pass_}, orbit={cur.relative_orbit})")

    pixels, masks = [], []
    for meta in scenes:
        pixels.append(_read_raster(root / meta.data_path, height, width, "<f4"))
        if meta.mask_path is None:
            masks.append(None)
        else:
            masks.append(_read_raster(root / meta.mask_path, height, width, "u1") != 0)

    return SceneCube(
        modality=doc["modality"],
        height=height,
        width=width,
        resolution_m=float(doc["resolution_m"]),
        scenes=scenes,
        pixels=pixels,
        masks=masks,
    )


def save_cube(cube: SceneCube, out_dir: str | Path) -> Path:
    """Write a cube directory; returns the manifest path.

    ``load_cube(save_cube(c))`` reproduces pixel bytes and scene order
    exactly (scenes are written in sorted order).
    """
    out_dir = Path(out_dir)
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)
    if any(m is not None for m in cube.masks):
        (out_dir / "masks").mkdir(exist_ok=True)

    order = sorted(range(len(cube)), key=lambda i: cube.scenes[i].sort_key)
    entries = []
    for seq, i in enumerate(order, start=1):
        meta = cube.scenes[i]
        data_rel = f"scenes/{seq:04d}.f32"
        np.ascontiguousarray(cube.pixels[i], dtype="<f4").tofile(out_dir / data_rel)
        mask_rel = None
        if cube.masks[i] is not None:
            mask_rel = f"masks/{seq:04d}.u8"
            cube.masks[i].astype("u1").tofile(out_dir / mask_rel)
        entries.append(
            {
                "date": meta.date.isoformat(),
                "pass": meta.pass_,
                "relative_orbit": meta.relative_orbit,
                "cloud_fraction": meta.cloud_fraction,
                "data": data_rel,
                "mask": mask_rel,
            }
        )

    manifest = {
        "version": MANIFEST_VERSION,
        "modality": cube.modality,
        "height": cube.height,
        "width": cube.width,
        "resolution_m": cube.resolution_m,
        "scenes": entries,
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest_path


def filter_by_cloud(cube: SceneCube, max_fraction: float) -> SceneCube:
    """Drop scenes whose cloud fraction is strictly above ``max_fraction``.

    Scenes at exactly the threshold are kept. Optical scenes with no cloud
    fraction recorded are kept and a warning is logged; non-optical scenes
    never carry cloud fractions and pass through silently.
    """
    if not 0.0 <= max_fraction <= 1.0:
        raise ValueError(f"max_fraction {max_fraction} outside [0, 1]")
    keep = []
    for i, meta in enumerate(cube.scenes):
        if meta.cloud_fraction is None:
            if cube.is_optical:
                log.warning(
                    "%s scene %s has no cloud fraction; keeping it", cube.modality, meta.date
                )
            keep.append(i)
        elif meta.cloud_fraction <= max_fraction:
            keep.append(i)
    return cube.subset(keep)


def restrict_period(cube: SceneCube, start: Date, end: Date) -> SceneCube:
    """Scenes with start <= date <= end, order preserved."""
    return cube.subset([i for i, s in enumerate(cube.scenes) if start <= s.date <= end])


def check_coregistered(*cubes: SceneCube) -> None:
    """Fail fast unless all cubes share (height, width, resolution_m)."""
    if not cubes:
        return
    ref = (cubes[0].height, cubes[0].width, cubes[0].resolution_m)
    for c in cubes[1:]:
        got = (c.height, c.width, c.resolution_m)
        if got != ref:
            raise CubeError(f"cubes not co-registered: {got} != {ref}")


def load_forest_mask(path: str | Path) -> ForestMask:
    """Read a forest mask binary; shape comes from the ``<path>.json`` sidecar."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.is_file():
        raise CubeError(f"missing forest mask sidecar {sidecar}")
    with open(sidecar) as fh:
        doc = json.load(fh)
    height, width = int(doc["height"]), int(doc["width"])
    cells = _read_raster(path, height, width, "u1")
    return ForestMask(height, width, cells)


def save_forest_mask(mask: ForestMask, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mask.cells.astype("u1").tofile(path)
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump({"height": mask.height, "width": mask.width}, fh)
    return path
