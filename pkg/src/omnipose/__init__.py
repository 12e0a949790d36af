"""Numerical core of a multi-scale pose estimator: convolutions, WASPv2, Gaussian-modulated
deconvolution, heatmap coding and keypoint metrics, all in float64 numpy."""

from omnipose.tensor import ConvLayer, Grad, ShapeError

__version__ = "0.1.0"
__all__ = ["ConvLayer", "Grad", "ShapeError", "__version__"]
