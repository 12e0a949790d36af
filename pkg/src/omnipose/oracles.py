"""Slow reference implementations used to check the vectorized kernels.

Everything here is written as explicit loops straight from the defining
sums and shares no code with :mod:`omnipose.tensor`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def conv2d_loops(x, w, b=None, stride=(1, 1), dilation=(1, 1), padding=(0, 0), depthwise=False):
    n_, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    (sh, sw), (dh, dw), (ph, pw) = stride, dilation, padding
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n_, cout, ho, wo))
    for n in range(n_):
        for co in range(cout):
            chans = [co] if depthwise else range(cin)
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in chans:
                        wc = 0 if depthwise else ci
                        for u in range(kh):
                            iy = y * sh - ph + u * dh
                            if not 0 <= iy < h:
                                continue
                            for v in range(kw):
                                ix = xx * sw - pw + v * dw
                                if 0 <= ix < wd:
                                    acc += x[n, ci, iy, ix] * w[co, wc, u, v]
                    out[n, co, y, xx] = acc
    return out


def transposed_conv2d_scatter(y, w, stride=(1, 1), dilation=(1, 1), padding=(0, 0), output_padding=(0, 0),
                              depthwise=False):
    """Scatter every input element, weighted by the kernel, into the output."""
    n_, cy, h, wd = y.shape
    _, cx, kh, kw = w.shape
    (sh, sw), (dh, dw), (ph, pw), (oh, ow) = stride, dilation, padding, output_padding
    ho = (h - 1) * sh - 2 * ph + dh * (kh - 1) + oh + 1
    wo = (wd - 1) * sw - 2 * pw + dw * (kw - 1) + ow + 1
    cout = cy if depthwise else cx
    out = np.zeros((n_, cout, ho, wo))
    for n in range(n_):
        for a in range(cy):
            targets = [a] if depthwise else range(cx)
            for i in range(h):
                for j in range(wd):
                    val = y[n, a, i, j]
                    for c in targets:
                        wc = 0 if depthwise else c
                        for u in range(kh):
                            oy = i * sh - ph + u * dh
                            if not 0 <= oy < ho:
                                continue
                            for v in range(kw):
                                ox = j * sw - pw + v * dw
                                if 0 <= ox < wo:
                                    out[n, c, oy, ox] += val * w[a, wc, u, v]
    return out


def avg_pool_loops(x):
    n_, c_, h, w = x.shape
    out = np.zeros((n_, c_, 1, 1))
    for n in range(n_):
        for c in range(c_):
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[n, c, i, j]
            out[n, c, 0, 0] = s / (h * w)
    return out


def central_difference(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """d f / d arr[index] by central differences; ``arr`` is perturbed in place and restored."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                     indices=None) -> np.ndarray:
    """Full (or partial, at ``indices``) finite-difference gradient of a scalar function."""
    g = np.zeros_like(arr)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for idx in it:
        g[idx] = central_difference(f, arr, idx, h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``|a - b| / max(|a|, |b|)`` in the Euclidean norm; 0 when both vanish."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
