"""Gaussian-modulated deconvolution.

A transposed convolution upsamples a feature map; each channel plane of the
result is then blurred with a fixed Gaussian and affinely rescaled so that
its minimum maps to 0 and its maximum to the pre-blur maximum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from omnipose import autodiff as ad
from omnipose import tensor as T


@dataclass(frozen=True)
class UpsampleGeometry:
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1
    output_padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid upsample geometry {self}")
        if not 0 <= self.output_padding < self.stride:
            raise ValueError("output_padding must lie in [0, stride)")

    def output_size(self, size: int) -> int:
        return T.transposed_output_size(size, self.kernel_size, self.stride, 1, self.padding, self.output_padding)


@dataclass(frozen=True)
class GdmConfig:
    kernel_size: int = 7
    sigma_mod: float = 2.0
    upsample: UpsampleGeometry = field(default_factory=UpsampleGeometry)
    enabled: bool = True

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if not self.sigma_mod > 0:
            raise ValueError(f"sigma_mod must be positive, got {self.sigma_mod}")


def gaussian_kernel2d(size: int, sigma: float) -> np.ndarray:
    """Isotropic Gaussian with its center element equal to 1."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"Gaussian kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    c = (size - 1) / 2
    r = np.arange(size) - c
    return np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))


def _blur_layer(channels: int, cfg: GdmConfig) -> T.ConvLayer:
    k = gaussian_kernel2d(cfg.kernel_size, cfg.sigma_mod)
    w = np.broadcast_to(k, (channels, 1) + k.shape).copy()
    pad = (cfg.kernel_size - 1) // 2
    return T.ConvLayer(w, padding=pad, mode="depthwise")


def _plane_stats(fd: np.ndarray, fg: np.ndarray):
    n, c = fd.shape[:2]
    d_flat, g_flat = fd.reshape(n, c, -1), fg.reshape(n, c, -1)
    i_d = d_flat.argmax(axis=2)
    i_min, i_max = g_flat.argmin(axis=2), g_flat.argmax(axis=2)
    take = lambda a, i: np.take_along_axis(a, i[..., None], axis=2)[..., 0]
    d_max, g_min, g_max = take(d_flat, i_d), take(g_flat, i_min), take(g_flat, i_max)
    # identity on planes where the rescale is undefined
    degenerate = (d_flat.max(axis=2) == d_flat.min(axis=2)) | (g_max == g_min)
    return i_d, i_min, i_max, d_max, g_min, g_max, degenerate


def _rescale(fd, fg, stats):
    _, _, _, d_max, g_min, g_max, degenerate = stats
    span = np.where(degenerate, 1.0, g_max - g_min)[..., None, None]
    out = (fg - g_min[..., None, None]) / span * d_max[..., None, None]
    return np.where(degenerate[..., None, None], fd, out)


def modulate(f_d: np.ndarray, cfg: GdmConfig = GdmConfig()) -> np.ndarray:
    """Blur every channel plane with the Gaussian, then map it to ``[0, max(f_d)]``.

    Constant planes (of either the input or the blurred map) are returned as-is.
    """
    f_d = np.asarray(f_d, dtype=np.float64)
    blur = _blur_layer(f_d.shape[1], cfg)
    f_g = T.conv2d(f_d, blur)
    return _rescale(f_d, f_g, _plane_stats(f_d, f_g))


def modulate_node(x, cfg: GdmConfig = GdmConfig()) -> ad.Var:
    x = ad.lift(x)
    f_d = x.value
    n, c, h, w = f_d.shape
    blur = _blur_layer(c, cfg)
    f_g = T.conv2d(f_d, blur)
    stats = _plane_stats(f_d, f_g)
    i_d, i_min, i_max, d_max, g_min, g_max, degenerate = stats
    out = _rescale(f_d, f_g, stats)

    def back(g):
        g_flat, fg_flat = g.reshape(n, c, -1), f_g.reshape(n, c, -1)
        span = np.where(degenerate, 1.0, g_max - g_min)[..., None]
        lo, hi, dm = g_min[..., None], g_max[..., None], d_max[..., None]
        g_fg = g_flat * dm / span
        g_lo = (g_flat * (fg_flat - hi)).sum(axis=2) * d_max / span[..., 0] ** 2
        g_hi = -(g_flat * (fg_flat - lo)).sum(axis=2) * d_max / span[..., 0] ** 2
        g_dmax = (g_flat * (fg_flat - lo) / span).sum(axis=2)
        ii, jj = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(g_fg, (ii, jj, i_min), g_lo)
        np.add.at(g_fg, (ii, jj, i_max), g_hi)
        g_fd = T.conv2d_backward(f_d, blur, g_fg.reshape(g.shape)).inputs[0].reshape(n, c, -1)
        np.add.at(g_fd, (ii, jj, i_d), g_dmax)
        g_fd = np.where(degenerate[..., None], g_flat, g_fd)
        return (g_fd.reshape(g.shape),)

    return ad.Var(out, (x,), back)


def upsample_layer(weights, cfg: GdmConfig = GdmConfig()) -> T.ConvLayer:
    """Wrap ``[Cin, Cout, k, k]`` deconvolution weights with the configured geometry."""
    u = cfg.upsample
    return T.ConvLayer(weights, stride=u.stride, padding=u.padding)


def gdm_upsample(f: np.ndarray, cfg: GdmConfig, weights: T.ConvLayer, bias=None) -> np.ndarray:
    """Transposed convolution followed by :func:`modulate` (when enabled)."""
    up = T.transposed_conv2d(f, weights, (cfg.upsample.output_padding,) * 2, bias)
    return modulate(up, cfg) if cfg.enabled else up


def gdm_upsample_node(f, cfg: GdmConfig, weights: T.ConvLayer, bias=None) -> ad.Var:
    up = ad.transposed_conv2d(f, weights, (cfg.upsample.output_padding,) * 2, bias)
    return modulate_node(up, cfg) if cfg.enabled else up
