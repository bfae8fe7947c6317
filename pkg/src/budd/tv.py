"""Spatiotemporal total-variation denoising of scene stacks.

Minimizes an anisotropic TV-L2 objective over the (time, row, col) volume:
quadratic fidelity on valid pixels, L1 forward differences along each axis
with separate spatial and temporal weights, Neumann boundaries. Invalid
pixels carry no fidelity term and are inpainted from their neighbors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from budd import _kernels


@dataclass(frozen=True)
class DenoiseParams:
    """TV solve configuration.

    lam is the overall regularization weight; spatial_weight and
    temporal_weight scale the in-scene and across-scene differences
    (time sampling is treated as unit-spaced). The solve stops at
    max_iters or once the relative objective change stays below tol.
    """

    lam: float = 0.3
    spatial_weight: float = 1.0
    temporal_weight: float = 0.5
    max_iters: int = 30
    tol: float = 1e-4

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.spatial_weight < 0 or self.temporal_weight < 0:
            raise ValueError("gradient weights must be >= 0")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")


def tv_objective(u: np.ndarray, f: np.ndarray, params: DenoiseParams,
                 valid: np.ndarray | None = None) -> float:
    """Objective value F(u) for a candidate u against the input volume f."""
    u = np.asarray(u, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    w = _weights(f.shape, valid)
    r = u - f
    fid = 0.5 * float(np.sum(w * r * r))
    tv = params.temporal_weight * float(np.sum(np.abs(np.diff(u, axis=0))))
    tv += params.spatial_weight * float(np.sum(np.abs(np.diff(u, axis=1))))
    tv += params.spatial_weight * float(np.sum(np.abs(np.diff(u, axis=2))))
    return fid + params.lam * tv


def _weights(shape, valid):
    if valid is None:
        return np.ones(shape)
    if valid.shape != shape:
        raise ValueError(f"valid mask shape {valid.shape} != volume shape {shape}")
    return valid.astype(np.float64)


def tv_denoise(volume: np.ndarray, params: DenoiseParams,
               valid: np.ndarray | None = None) -> np.ndarray:
    """Denoised copy of a (time, height, width) volume.

    lam = 0 returns the input bit-exactly. Raises ValueError on a non-finite
    value at a valid pixel.
    """
    out, _ = tv_denoise_with_history(volume, params, valid)
    return out


def tv_denoise_with_history(volume: np.ndarray, params: DenoiseParams,
                            valid: np.ndarray | None = None):
    """tv_denoise plus the per-iteration objective history.

    The history is non-increasing: the solver reports its best iterate so
    far. history[0] is the objective of the input volume.
    """
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3-D (time, height, width) volume, got ndim={vol.ndim}")
    w = _weights(vol.shape, valid)
    bad = ~np.isfinite(vol) & (w > 0)
    if bad.any():
        t, y, x = np.argwhere(bad)[0]
        raise ValueError(f"non-finite value at valid pixel (t={t}, row={y}, col={x})")
    if not np.isfinite(vol).all():
        # Invalid pixels may hold garbage; neutralize them so the TV term
        # stays finite (they have no fidelity weight anyway).
        vol = np.where(np.isfinite(vol), vol, 0.0)
    u, history = _kernels.tv_solve(
        np.ascontiguousarray(vol),
        np.ascontiguousarray(w),
        float(params.lam),
        float(params.spatial_weight),
        float(params.temporal_weight),
        int(params.max_iters),
        float(params.tol),
    )
    return u, history
