"""Multi-modal Bayesian updating deforestation detection.

Per-pixel forest/non-forest Gaussian models over optical and SAR-derived
time series drive an iterative Bayesian alerting state machine. Hot kernels
run in a compiled extension when available; see budd._kernels.BACKEND.
"""

from budd._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
