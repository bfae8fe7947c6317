"""Per-pixel Bayesian alerting over monitoring-period observations.

Each observation day yields the conditional probability that the pixel now
follows its non-forest distribution; same-day values from several modalities
multiply into one joint update under conditional independence. A pixel is
flagged once that probability exceeds the flag threshold, then keeps
updating with the running posterior as prior until it either confirms
(posterior above the confirm threshold with enough observations) or drops
below the clear threshold and returns to plain monitoring.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from datetime import date as Date, timedelta
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from budd import _kernels
from budd.cube import SceneCube, check_coregistered
from budd.errors import CubeError
from budd.model import MODALITY_ORDER, ModelEntry, ModelGrid

log = logging.getLogger("budd.detector")

_EPOCH = Date(1970, 1, 1)

SQRT_2PI = _kernels.SQRT_2PI
PDF_FLOOR = _kernels.PDF_FLOOR

NO_DETECTION = -1
UNMODELED = -2

MAP_VERSION = 1


def to_epoch_day(d: Date) -> int:
    return (d - _EPOCH).days


def from_epoch_day(day: int) -> Date:
    return _EPOCH + timedelta(days=int(day))


class StateTag(IntEnum):
    MONITORING = _kernels.TAG_MONITORING
    FLAGGED = _kernels.TAG_FLAGGED
    DEFORESTED = _kernels.TAG_DEFORESTED


@dataclass(frozen=True)
class Thresholds:
    """Posterior thresholds driving the state machine.

    All comparisons are strict: flag when the probability exceeds ``flag``,
    confirm when it exceeds ``confirm`` with at least ``min_obs``
    observations since the flag (inclusive), clear when it drops below
    ``clear``.
    """

    flag: float = 0.6
    confirm: float = 0.975
    clear: float = 0.5
    min_obs: int = 2
    prior: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.clear <= self.flag < self.confirm < 1.0):
            raise ValueError(
                f"need 0 < clear <= flag < confirm < 1, got {self.clear}/{self.flag}/{self.confirm}"
            )
        if self.min_obs < 1:
            raise ValueError(f"min_obs must be >= 1, got {self.min_obs}")
        if not 0.0 < self.prior < 1.0:
            raise ValueError(f"prior must be in (0, 1), got {self.prior}")


@dataclass(frozen=True)
class Observation:
    """Values acquired on one day, keyed by modality."""

    date: Date
    values: Mapping[str, float]

    def __post_init__(self):
        if not self.values:
            raise ValueError("observation carries no modality values")


@dataclass(frozen=True)
class DetectorState:
    tag: StateTag = StateTag.MONITORING
    posterior: float = 0.0
    obs_count: int = 0
    flag_date: Date | None = None
    confirm_date: Date | None = None
    modalities: frozenset[str] = frozenset()


MONITORING = DetectorState()


@dataclass(frozen=True)
class AlertRecord:
    """A confirmed deforestation event for one pixel."""

    row: int
    col: int
    flag_date: Date
    confirm_date: Date
    obs_count: int
    modalities_used: frozenset[str]


def gaussian_pdf(x: float, mu: float, sigma: float) -> float:
    """Normal density, floored at PDF_FLOOR instead of underflowing to 0."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    z = (x - mu) / sigma
    p = math.exp(-0.5 * z * z) / (sigma * SQRT_2PI)
    if p < PDF_FLOOR:
        p = PDF_FLOOR
    return p


def _fuse(obs: Observation, model: Mapping[str, ModelEntry], prior: float) -> float:
    """Bayes update without the public prior check: a running posterior may
    saturate to exactly 1.0 in float64 at extreme likelihood ratios, and the
    update must keep absorbing it the way the tile kernels do."""
    lf = 1.0
    lnf = 1.0
    used = 0
    for m in MODALITY_ORDER:
        x = obs.values.get(m)
        entry = model.get(m)
        if x is None or entry is None:
            continue
        lf *= gaussian_pdf(x, entry.mu_f, entry.sigma)
        if lf < PDF_FLOOR:
            lf = PDF_FLOOR
        lnf *= gaussian_pdf(x, entry.mu_nf, entry.sigma)
        if lnf < PDF_FLOOR:
            lnf = PDF_FLOOR
        used += 1
    if used == 0:
        raise ValueError("no modeled modality present in observation")
    num = lnf * prior
    return num / (num + lf * (1.0 - prior))


def conditional_nonforest(obs: Observation, model: Mapping[str, ModelEntry],
                          prior: float) -> float:
    """Posterior probability of the non-forest hypothesis after one day.

    Likelihoods multiply over the modalities present in both the observation
    and the model, in canonical order; the running products are floored at
    PDF_FLOOR so the result is always a number in (0, 1].
    """
    if not 0.0 < prior < 1.0:
        raise ValueError(f"prior must be in (0, 1), got {prior}")
    return _fuse(obs, model, prior)


def usable_modalities(obs: Observation, model: Mapping[str, ModelEntry]) -> frozenset[str]:
    return frozenset(m for m in MODALITY_ORDER if m in obs.values and model.get(m) is not None)


def transition(state: DetectorState, posterior: float, when: Date,
               used: frozenset[str], thresholds: Thresholds) -> DetectorState:
    """Apply the threshold rules to one computed posterior.

    Exposed separately from step() so boundary behavior can be exercised
    with exact probability values.
    """
    if state.tag == StateTag.DEFORESTED:
        return state
    if state.tag == StateTag.MONITORING:
        if posterior > thresholds.flag:
            return DetectorState(
                tag=StateTag.FLAGGED,
                posterior=posterior,
                obs_count=1,
                flag_date=when,
                modalities=used,
            )
        return MONITORING
    count = state.obs_count + 1
    merged = state.modalities | used
    if posterior > thresholds.confirm and count >= thresholds.min_obs:
        return DetectorState(
            tag=StateTag.DEFORESTED,
            posterior=posterior,
            obs_count=count,
            flag_date=state.flag_date,
            confirm_date=when,
            modalities=merged,
        )
    if posterior < thresholds.clear:
        return MONITORING
    return replace(state, posterior=posterior, obs_count=count, modalities=merged)


def step(state: DetectorState, obs: Observation, model: Mapping[str, ModelEntry],
         thresholds: Thresholds) -> DetectorState:
    """Advance one pixel's state by one observation day.

    Deforested is absorbing; a day with no usable modality leaves the state
    untouched. Observations must arrive in increasing date order.
    """
    if state.tag == StateTag.DEFORESTED:
        return state
    if state.flag_date is not None and obs.date < state.flag_date:
        raise ValueError(f"observation {obs.date} precedes flag date {state.flag_date}")
    used = usable_modalities(obs, model)
    if not used:
        return state
    prior = thresholds.prior if state.tag == StateTag.MONITORING else state.posterior
    posterior = _fuse(obs, model, prior)
    return transition(state, posterior, obs.date, used, thresholds)


def run_pixel(model: Mapping[str, ModelEntry], observations: Iterable[Observation],
              thresholds: Thresholds, row: int = 0, col: int = 0):
    """Fold step() over date-ordered observations.

    Returns (final state, AlertRecord or None); the record is emitted only
    when the final state is Deforested.
    """
    state = MONITORING
    last: Date | None = None
    for obs in observations:
        if last is not None and obs.date <= last:
            raise ValueError(f"observations out of order: {obs.date} after {last}")
        last = obs.date
        state = step(state, obs, model, thresholds)
    alert = None
    if state.tag == StateTag.DEFORESTED:
        alert = AlertRecord(
            row=row,
            col=col,
            flag_date=state.flag_date,
            confirm_date=state.confirm_date,
            obs_count=state.obs_count,
            modalities_used=state.modalities,
        )
    return state, alert


def _build_schedule(cubes: Mapping[str, SceneCube], subset: Sequence[str]):
    """Unique sorted observation days plus per-slot scene row ranges."""
    day_sets = set()
    per_mod_days = {}
    for m in subset:
        cube = cubes.get(m)
        if cube is None:
            continue
        days = [to_epoch_day(s.date) for s in cube.scenes]
        per_mod_days[m] = days
        day_sets.update(days)
    days_sorted = sorted(day_sets)
    day_index = {d: i for i, d in enumerate(days_sorted)}
    nsteps = len(days_sorted)

    starts, rows = [], []
    for m in MODALITY_ORDER:
        if m not in per_mod_days:
            starts.append(np.zeros(nsteps + 1, dtype=np.int32))
            rows.append(np.zeros(0, dtype=np.int32))
            continue
        counts = np.zeros(nsteps + 1, dtype=np.int64)
        for d in per_mod_days[m]:
            counts[day_index[d] + 1] += 1
        offsets = np.cumsum(counts)
        fill = offsets[:-1].copy()
        mod_rows = np.zeros(len(per_mod_days[m]), dtype=np.int32)
        for t, d in enumerate(per_mod_days[m]):
            s = day_index[d]
            mod_rows[fill[s]] = t
            fill[s] += 1
        starts.append(offsets.astype(np.int32))
        rows.append(mod_rows)
    dates = np.asarray(days_sorted, dtype=np.int32)
    return dates, starts, rows


def run_tile(models: ModelGrid, cubes: Mapping[str, SceneCube], thresholds: Thresholds,
             modality_subset: Sequence[str] = MODALITY_ORDER):
    """Detect over a tile; cubes must already be monitoring-period scenes.

    Returns (detection map int32 (H, W), alerts). Map values are the confirm
    date in days since 1970-01-01, NO_DETECTION, or UNMODELED for pixels
    with no modeled modality in the subset.
    """
    subset = [m for m in MODALITY_ORDER if m in modality_subset]
    if not subset:
        raise ValueError(f"empty modality subset {modality_subset!r}")
    present = [cubes[m] for m in subset if m in cubes]
    if present:
        check_coregistered(*present)
        height, width = present[0].height, present[0].width
        if (height, width) != (models.height, models.width):
            raise CubeError(
                f"model grid {models.height}x{models.width} does not match cubes {height}x{width}"
            )
    height, width = models.height, models.width
    n = height * width

    dates, starts, rows = _build_schedule(cubes, subset)

    vals, valids = [], []
    mu_f = np.zeros((3, n))
    sigma = np.ones((3, n))
    mu_nf = np.zeros((3, n))
    modeled = np.zeros((3, n), dtype=np.uint8)
    for slot, m in enumerate(MODALITY_ORDER):
        cube = cubes.get(m) if m in subset else None
        if cube is None or len(cube) == 0:
            vals.append(np.zeros((0, n), dtype=np.float32))
            valids.append(np.zeros((0, n), dtype=np.uint8))
        else:
            v = np.stack([p.reshape(-1) for p in cube.pixels]).astype(np.float32)
            ok = np.stack([cube.valid_mask(i).reshape(-1) for i in range(len(cube))]).astype(np.uint8)
            ok &= np.isfinite(v)
            vals.append(np.ascontiguousarray(v))
            valids.append(np.ascontiguousarray(ok))
        mm = models.entries.get(m) if m in subset else None
        if mm is not None:
            mask = mm.modeled(models.min_obs).reshape(-1)
            mu_f[slot] = np.where(mask, mm.mu_f.reshape(-1), 0.0)
            sigma[slot] = np.where(mask, mm.sigma.reshape(-1), 1.0)
            mu_nf[slot] = np.where(mask, mm.mu_nf.reshape(-1), 0.0)
            modeled[slot] = mask.astype(np.uint8)

    tag, _, count, flag_day, confirm_day, modbits = _kernels.detect_pixels(
        dates,
        starts,
        rows,
        vals,
        valids,
        np.ascontiguousarray(mu_f),
        np.ascontiguousarray(sigma),
        np.ascontiguousarray(mu_nf),
        np.ascontiguousarray(modeled),
        float(thresholds.flag),
        float(thresholds.confirm),
        float(thresholds.clear),
        float(thresholds.prior),
        int(thresholds.min_obs),
    )

    any_model = modeled.any(axis=0)
    detection = np.full(n, NO_DETECTION, dtype=np.int32)
    detection[~any_model] = UNMODELED
    deforested = tag == StateTag.DEFORESTED
    detection[deforested] = confirm_day[deforested]

    alerts = []
    for i in np.flatnonzero(deforested):
        used = frozenset(
            MODALITY_ORDER[b] for b in range(3) if modbits[i] & (1 << b)
        )
        alerts.append(
            AlertRecord(
                row=int(i // width),
                col=int(i % width),
                flag_date=from_epoch_day(flag_day[i]),
                confirm_date=from_epoch_day(confirm_day[i]),
                obs_count=int(count[i]),
                modalities_used=used,
            )
        )
    return detection.reshape(height, width), alerts


def save_detection_map(detection: np.ndarray, path: str | Path,
                       kind: str = "detection") -> Path:
    """Raw int32 LE raster plus a JSON sidecar at <path>.json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(detection, dtype="<i4")
    arr.tofile(path)
    sidecar = {
        "version": MAP_VERSION,
        "kind": kind,
        "height": int(detection.shape[0]),
        "width": int(detection.shape[1]),
        "epoch": "1970-01-01",
        "no_detection": NO_DETECTION,
        "unmodeled": UNMODELED,
    }
    with open(path.with_name(path.name + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=1)
    return path


def load_detection_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    if not sidecar.is_file():
        raise CubeError(f"missing map sidecar {sidecar}")
    with open(sidecar) as fh:
        doc = json.load(fh)
    height, width = int(doc["height"]), int(doc["width"])
    raw = np.fromfile(path, dtype="<i4")
    if raw.size != height * width:
        raise CubeError(f"{path}: wrong raster size for {height}x{width}")
    return raw.reshape(height, width).astype(np.int32)


def save_alerts(alerts: Sequence[AlertRecord], path: str | Path) -> Path:
    """JSON-lines alert records in deterministic (row, col) order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for a in sorted(alerts, key=lambda a: (a.row, a.col)):
            fh.write(
                json.dumps(
                    {
                        "row": a.row,
                        "col": a.col,
                        "flag_date": a.flag_date.isoformat(),
                        "confirm_date": a.confirm_date.isoformat(),
                        "obs_count": a.obs_count,
                        "modalities": sorted(a.modalities_used),
                    }
                )
                + "\n"
            )
    return path


def load_alerts(path: str | Path) -> list[AlertRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            out.append(
                AlertRecord(
                    row=int(doc["row"]),
                    col=int(doc["col"]),
                    flag_date=Date.fromisoformat(doc["flag_date"]),
                    confirm_date=Date.fromisoformat(doc["confirm_date"]),
                    obs_count=int(doc["obs_count"]),
                    modalities_used=frozenset(doc["modalities"]),
                )
            )
    return out
