"""Detection-map comparison, counting, and image rendering.

Comparison maps are tri-category: detected by A only, detected by B only,
or agreeing (both detected or both not). Pixels unmodeled in either map are
excluded and counted separately. Rendering writes lossless PPM (P6) or PNG
with a fixed, invertible color table per palette.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from budd.detector import UNMODELED
from budd.errors import CubeError

AGREE = 0
A_ONLY = 1
B_ONLY = 2
EXCLUDED = 3

# Detection-map categories used by the "alerts" palette.
ALERT_NONE = 0
ALERT_DETECTED = 1
ALERT_UNMODELED = 2

PALETTES: dict[str, dict[int, tuple[int, int, int]]] = {
    "alerts": {
        ALERT_NONE: (184, 184, 184),
        ALERT_DETECTED: (0, 160, 0),
        ALERT_UNMODELED: (64, 64, 64),
    },
    "agreement": {
        AGREE: (128, 128, 128),
        A_ONLY: (220, 40, 40),
        B_ONLY: (40, 40, 220),
        EXCLUDED: (255, 255, 255),
    },
}


@dataclass(frozen=True)
class ComparisonCounts:
    agree: int
    a_only: int
    b_only: int
    excluded: int

    def as_dict(self) -> dict[str, int]:
        return {
            "agree": self.agree,
            "a_only": self.a_only,
            "b_only": self.b_only,
            "excluded": self.excluded,
        }


def compare_maps(a: np.ndarray, b: np.ndarray):
    """Per-pixel agreement between two detection maps.

    Agreement ignores timing: a pixel detected by both maps on different
    dates still agrees. Returns (categories uint8, ComparisonCounts).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    excluded = (a == UNMODELED) | (b == UNMODELED)
    da = a >= 0
    db = b >= 0
    cat = np.full(a.shape, AGREE, dtype=np.uint8)
    cat[da & ~db] = A_ONLY
    cat[db & ~da] = B_ONLY
    cat[excluded] = EXCLUDED
    counts = ComparisonCounts(
        agree=int((cat == AGREE).sum()),
        a_only=int((cat == A_ONLY).sum()),
        b_only=int((cat == B_ONLY).sum()),
        excluded=int((cat == EXCLUDED).sum()),
    )
    return cat, counts


def count_detections(maps: Mapping[str, np.ndarray]) -> dict[str, int]:
    """Confirmed-pixel totals per named detection map."""
    return {name: int((arr >= 0).sum()) for name, arr in maps.items()}


def timing_differences(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """confirm_date(a) - confirm_date(b) in days over jointly detected pixels."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    both = (a >= 0) & (b >= 0)
    return (a[both].astype(np.int64) - b[both].astype(np.int64))


def alert_categories(detection: np.ndarray) -> np.ndarray:
    """Collapse a detection map to the alerts palette categories."""
    cat = np.full(detection.shape, ALERT_NONE, dtype=np.uint8)
    cat[detection >= 0] = ALERT_DETECTED
    cat[detection == UNMODELED] = ALERT_UNMODELED
    return cat


def write_ppm(rgb: np.ndarray, path: Path) -> None:
    height, width = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{width} {height}\n255\n".encode())
        fh.write(rgb.astype(np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise CubeError(f"{path}: not a P6 pixmap")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise CubeError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(data, dtype=np.uint8, count=height * width * 3, offset=pos)
    return raw.reshape(height, width, 3).copy()


def render(map_array: np.ndarray, palette: str, path: str | Path) -> Path:
    """Render a detection or comparison map to a lossless image.

    The "alerts" palette takes a detection map (int32) and the "agreement"
    palette a comparison category map (uint8). Output format follows the
    file suffix: .ppm (default) or .png.
    """
    if palette not in PALETTES:
        raise ValueError(f"unknown palette {palette!r}; have {sorted(PALETTES)}")
    if palette == "alerts":
        cat = alert_categories(np.asarray(map_array))
    else:
        cat = np.asarray(map_array, dtype=np.uint8)
        known = np.isin(cat, list(PALETTES[palette]))
        if not known.all():
            raise ValueError("comparison map holds categories outside the palette")

    table = PALETTES[palette]
    rgb = np.zeros(cat.shape + (3,), dtype=np.uint8)
    for code, color in table.items():
        rgb[cat == code] = color

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    else:
        write_ppm(rgb, path)
    return path


def decode(path: str | Path, palette: str) -> np.ndarray:
    """Recover the category map from a rendered image (exact inverse)."""
    if palette not in PALETTES:
        raise ValueError(f"unknown palette {palette!r}; have {sorted(PALETTES)}")
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        rgb = np.asarray(Image.open(path).convert("RGB"))
    else:
        rgb = read_ppm(path)
    cat = np.full(rgb.shape[:2], 255, dtype=np.uint8)
    for code, color in PALETTES[palette].items():
        cat[np.all(rgb == color, axis=-1)] = code
    if (cat == 255).any():
        raise CubeError(f"{path}: pixel color not in palette {palette!r}")
    return cat


def save_comparison_map(cat: np.ndarray, path: str | Path) -> Path:
    """Comparison categories as a raw uint8 raster with a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cat.astype("u1").tofile(path)
    sidecar = {
        "version": 1,
        "kind": "comparison",
        "height": int(cat.shape[0]),
        "width": int(cat.shape[1]),
        "categories": {"agree": AGREE, "a_only": A_ONLY, "b_only": B_ONLY, "excluded": EXCLUDED},
    }
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=1)
    return path


def load_comparison_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.is_file():
        raise CubeError(f"missing map sidecar {sidecar}")
    with open(sidecar) as fh:
        doc = json.load(fh)
    height, width = int(doc["height"]), int(doc["width"])
    raw = np.fromfile(path, dtype="u1")
    if raw.size != height * width:
        raise CubeError(f"{path}: wrong raster size")
    return raw.reshape(height, width)


def counts_table(counts: Mapping[str, int], title: str = "") -> str:
    """Aligned plain-text table of name -> count."""
    names = list(counts)
    width = max([len(n) for n in names] + [4])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'name':<{width}}  count")
    for n in names:
        lines.append(f"{n:<{width}}  {counts[n]}")
    return "\n".join(lines) + "\n"
