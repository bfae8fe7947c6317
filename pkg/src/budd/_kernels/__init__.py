"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-Python
reference implementation is the fallback. Both produce bit-identical
results for the fit and detect kernels. Set BUDD_KERNELS=python (or
=cython) to force a backend; forcing cython raises if the extension is
missing.
"""
from __future__ import annotations

import os

from budd._kernels import reference

_choice = os.environ.get("BUDD_KERNELS", "auto").strip().lower()

if _choice in ("auto", "", "cython", "c", "compiled"):
    try:
        from budd._kernels import _core as _impl

        BACKEND = "cython"
    except ImportError:
        if _choice not in ("auto", ""):
            raise
        _impl = reference
        BACKEND = "python"
elif _choice in ("python", "py", "reference"):
    _impl = reference
    BACKEND = "python"
else:
    raise ValueError(f"BUDD_KERNELS={_choice!r}: expected 'auto', 'cython' or 'python'")

fit_pixels = _impl.fit_pixels
detect_pixels = _impl.detect_pixels
tv_solve = _impl.tv_solve

TAG_MONITORING = reference.TAG_MONITORING
TAG_FLAGGED = reference.TAG_FLAGGED
TAG_DEFORESTED = reference.TAG_DEFORESTED
SQRT_2PI = reference.SQRT_2PI
PDF_FLOOR = reference.PDF_FLOOR


def available_backends() -> dict[str, object]:
    """Importable kernel modules keyed by backend name (for benchmarks/tests)."""
    out = {"python": reference}
    try:
        from budd._kernels import _core

        out["cython"] = _core
    except ImportError:
        pass
    return out
