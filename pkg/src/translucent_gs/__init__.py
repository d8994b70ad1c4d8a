"""Translucent-object surface reconstruction with surface and interior Gaussian kernels."""

import numba

# the system TBB is too old for numba; the portable work queue is deterministic anyway
numba.config.THREADING_LAYER = "workqueue"

from .scene import CameraView, GaussianKernel, GaussianScene, Hyperparameters, Population

__all__ = ["CameraView", "GaussianKernel", "GaussianScene", "Hyperparameters", "Population"]
__version__ = "0.1.0"
