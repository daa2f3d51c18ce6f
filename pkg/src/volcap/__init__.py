"""Multi-view RGB-D capture toolkit: calibration, synchronization, FFT-based volumetric
reconstruction, texturing, objective evaluation and volume-based skeleton tracking."""

from .kernels import get_backend

__version__ = "0.1.0"

__all__ = ["get_backend", "__version__"]
