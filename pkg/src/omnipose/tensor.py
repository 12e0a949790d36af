"""Dense float64 tensors and the convolution operator set.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout with dtype
float64. Every operation here is a pure function; the matching
``*_backward`` function returns the cotangents of its operands as a
:class:`Grad`.

Convolution is cross-correlation (no kernel flip) with zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

MODES = ("standard", "depthwise", "pointwise", "separable")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Build a float64 tensor, optionally reshaping flat row-major data."""
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"shape dimensions must be positive, got {shape}")
        if arr.size != int(np.prod(shape)):
            raise ShapeError(
                f"data length {arr.size} does not match shape {shape} "
                f"(expected {int(np.prod(shape))} elements)"
            )
        arr = arr.reshape(shape)
    return arr


def _pair(v, name: str, minimum: int) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        v = (int(v), int(v))
    v = tuple(int(a) for a in v)
    if len(v) != 2 or any(a < minimum for a in v):
        raise ValueError(f"{name} must be a pair of integers >= {minimum}, got {v}")
    return v


@dataclass(frozen=True)
class ConvLayer:
    """Weights and geometry of one convolution.

    ``weights`` is ``[Cout, Cin, kH, kW]`` for standard/pointwise layers and
    ``[C, 1, kH, kW]`` for depthwise ones. A separable layer stores the
    depthwise stage in ``weights``/``bias`` and the 1x1 stage in
    ``pointwise_weights``/``pointwise_bias``.

    Weight fields may hold any array-like exposing ``.shape`` (the autodiff
    graph stores :class:`omnipose.autodiff.Var` nodes here).
    """

    weights: Any
    bias: Any = None
    stride: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    mode: str = "standard"
    pointwise_weights: Any = None
    pointwise_bias: Any = None

    def __post_init__(self):
        object.__setattr__(self, "stride", _pair(self.stride, "stride", 1))
        object.__setattr__(self, "dilation", _pair(self.dilation, "dilation", 1))
        object.__setattr__(self, "padding", _pair(self.padding, "padding", 0))
        if self.mode not in MODES:
            raise ValueError(f"unknown conv mode {self.mode!r}; expected one of {MODES}")
        ws = tuple(self.weights.shape)
        if len(ws) != 4:
            raise ShapeError(f"conv weights must be 4-D [Cout, Cin, kH, kW], got {ws}")
        if self.bias is not None and tuple(self.bias.shape) != (ws[0],):
            raise ShapeError(f"bias shape {tuple(self.bias.shape)} does not match Cout={ws[0]}")
        if self.mode in ("depthwise", "separable") and ws[1] != 1:
            raise ShapeError(f"depthwise weights must be [C, 1, kH, kW], got {ws}")
        if self.mode == "pointwise" and ws[2:] != (1, 1):
            raise ShapeError(f"pointwise mode requires a 1x1 kernel, got {ws[2]}x{ws[3]}")
        if self.mode == "separable":
            if self.pointwise_weights is None:
                raise ValueError("separable mode needs pointwise_weights")
            pw = tuple(self.pointwise_weights.shape)
            if len(pw) != 4 or pw[1] != ws[0] or pw[2:] != (1, 1):
                raise ShapeError(
                    f"pointwise weights must be [Cout, {ws[0]}, 1, 1], got {pw}"
                )
            if self.pointwise_bias is not None and tuple(self.pointwise_bias.shape) != (pw[0],):
                raise ShapeError("pointwise bias does not match pointwise Cout")

    @property
    def kernel_size(self) -> tuple[int, int]:
        return tuple(self.weights.shape[2:])

    @property
    def in_channels(self) -> int:
        if self.mode in ("depthwise", "separable"):
            return self.weights.shape[0]
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        if self.mode == "separable":
            return self.pointwise_weights.shape[0]
        return self.weights.shape[0]

    @property
    def groups(self) -> int:
        return self.weights.shape[0] if self.mode in ("depthwise", "separable") else 1

    def split(self) -> tuple["ConvLayer", "ConvLayer"]:
        """Return the (depthwise, pointwise) stages of a separable layer."""
        if self.mode != "separable":
            raise ValueError("split() is only defined for separable layers")
        dw = ConvLayer(self.weights, self.bias, self.stride, self.dilation, self.padding, "depthwise")
        pw = ConvLayer(self.pointwise_weights, self.pointwise_bias, mode="pointwise")
        return dw, pw


@dataclass
class Grad:
    """Cotangents of an operation's inputs and parameters.

    ``inputs`` follows the positional order of the tensor operands;
    ``params`` is keyed by the ConvLayer field name.
    """

    inputs: tuple[np.ndarray, ...]
    params: dict[str, np.ndarray] = field(default_factory=dict)


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def transposed_output_size(
    size: int, k: int, stride: int, dilation: int, padding: int, output_padding: int = 0
) -> int:
    return (size - 1) * stride - 2 * padding + dilation * (k - 1) + output_padding + 1


def _check_nchw(x: np.ndarray, what: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what} must be 4-D NCHW, got shape {x.shape}")


def _out_hw(layer: ConvLayer, h: int, w: int) -> tuple[int, int]:
    kh, kw = layer.kernel_size
    ho = conv_output_size(h, kh, layer.stride[0], layer.dilation[0], layer.padding[0])
    wo = conv_output_size(w, kw, layer.stride[1], layer.dilation[1], layer.padding[1])
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"non-positive output size {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {layer.stride}, dilation {layer.dilation}, padding {layer.padding}"
        )
    return ho, wo


def _tap_slices(layer: ConvLayer, ho: int, wo: int):
    kh, kw = layer.kernel_size
    (sh, sw), (dh, dw) = layer.stride, layer.dilation
    for u in range(kh):
        for v in range(kw):
            yield (
                slice(u * dh, u * dh + sh * (ho - 1) + 1, sh),
                slice(v * dw, v * dw + sw * (wo - 1) + 1, sw),
            )


def _im2col(xp: np.ndarray, layer: ConvLayer, ho: int, wo: int) -> np.ndarray:
    # [N, C, kH*kW, Ho, Wo]
    return np.stack([xp[:, :, ys, xs] for ys, xs in _tap_slices(layer, ho, wo)], axis=2)


def _col2im(cols: np.ndarray, layer: ConvLayer, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    ph, pw = layer.padding
    ho, wo = cols.shape[-2:]
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    for t, (ys, xs) in enumerate(_tap_slices(layer, ho, wo)):
        xp[:, :, ys, xs] += cols[:, :, t]
    return xp[:, :, ph : ph + h, pw : pw + w]


def _pad(x: np.ndarray, padding: tuple[int, int]) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> None:
    _check_nchw(x)
    if x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"input channel dimension (axis 1) is {x.shape[1]} but the layer expects "
            f"Cin={layer.in_channels}"
        )


def _linear_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Single-stage conv (standard / depthwise / pointwise) without bias."""
    n = x.shape[0]
    ho, wo = _out_hw(layer, x.shape[2], x.shape[3])
    cols = _im2col(_pad(x, layer.padding), layer, ho, wo)
    w = np.asarray(layer.weights)
    if layer.groups == 1:
        out = np.matmul(w.reshape(w.shape[0], -1), cols.reshape(n, -1, ho * wo))
        return out.reshape(n, w.shape[0], ho, wo)
    return np.einsum("nckhw,ck->nchw", cols, w.reshape(w.shape[0], -1))


def _add_bias(out: np.ndarray, bias) -> np.ndarray:
    if bias is None:
        return out
    return out + np.asarray(bias)[None, :, None, None]


def _stage_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _check_conv_input(x, layer)
    return _add_bias(_linear_forward(x, layer), layer.bias)


def conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Dilated, strided cross-correlation with zero padding.

    Separable layers are dispatched to :func:`separable_conv2d`.
    """
    if layer.mode == "separable":
        return separable_conv2d(x, layer)
    return _stage_forward(np.asarray(x, dtype=np.float64), layer)


def _linear_backward_input(g: np.ndarray, layer: ConvLayer, in_shape) -> np.ndarray:
    n, _, ho, wo = g.shape
    w = np.asarray(layer.weights)
    if layer.groups == 1:
        w2 = w.reshape(w.shape[0], -1)
        gcols = np.matmul(w2.T, g.reshape(n, w.shape[0], ho * wo))
        gcols = gcols.reshape(n, in_shape[1], -1, ho, wo)
    else:
        wk = w.reshape(w.shape[0], -1)
        gcols = g[:, :, None] * wk[None, :, :, None, None]
    return _col2im(gcols, layer, in_shape)


def _linear_backward_weights(x: np.ndarray, g: np.ndarray, layer: ConvLayer) -> np.ndarray:
    n, _, ho, wo = g.shape
    cols = _im2col(_pad(x, layer.padding), layer, ho, wo)
    wshape = tuple(layer.weights.shape)
    if layer.groups == 1:
        gw = np.einsum("nop,nqp->oq", g.reshape(n, g.shape[1], -1), cols.reshape(n, -1, ho * wo))
        return gw.reshape(wshape)
    return np.einsum("nchw,nckhw->ck", g, cols).reshape(wshape)


def _stage_backward(x: np.ndarray, layer: ConvLayer, g: np.ndarray) -> Grad:
    params = {"weights": _linear_backward_weights(x, g, layer)}
    if layer.bias is not None:
        params["bias"] = g.sum(axis=(0, 2, 3))
    return Grad((_linear_backward_input(g, layer, x.shape),), params)


def _check_upstream(g: np.ndarray, expected: tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != tuple(expected):
        raise ShapeError(f"upstream cotangent shape {g.shape} does not match output shape {tuple(expected)}")
    return g


def conv2d_backward(x: np.ndarray, layer: ConvLayer, upstream: np.ndarray) -> Grad:
    if layer.mode == "separable":
        return separable_conv2d_backward(x, layer, upstream)
    x = np.asarray(x, dtype=np.float64)
    _check_conv_input(x, layer)
    ho, wo = _out_hw(layer, x.shape[2], x.shape[3])
    g = _check_upstream(upstream, (x.shape[0], layer.out_channels, ho, wo))
    return _stage_backward(x, layer, g)


def separable_conv2d(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """pointwise(relu(depthwise(x))); the pointwise stage has stride 1."""
    if layer.mode != "separable":
        raise ValueError(f"separable_conv2d needs a separable layer, got mode {layer.mode!r}")
    dw, pw = layer.split()
    h = _stage_forward(np.asarray(x, dtype=np.float64), dw)
    return _stage_forward(relu(h), pw)


def separable_conv2d_backward(x: np.ndarray, layer: ConvLayer, upstream: np.ndarray) -> Grad:
    dw, pw = layer.split()
    x = np.asarray(x, dtype=np.float64)
    h = _stage_forward(x, dw)
    a = relu(h)
    out_shape = (x.shape[0], pw.out_channels) + h.shape[2:]
    g = _check_upstream(upstream, out_shape)
    gp = _stage_backward(a, pw, g)
    gh = relu_backward(h, gp.inputs[0]).inputs[0]
    gd = _stage_backward(x, dw, gh)
    params = {"weights": gd.params["weights"], "pointwise_weights": gp.params["weights"]}
    if dw.bias is not None:
        params["bias"] = gd.params["bias"]
    if pw.bias is not None:
        params["pointwise_bias"] = gp.params["bias"]
    return Grad(gd.inputs, params)


def _transposed_out_shape(y: np.ndarray, layer: ConvLayer, output_padding) -> tuple[int, ...]:
    oh, ow = _pair(output_padding, "output_padding", 0)
    if oh >= layer.stride[0] or ow >= layer.stride[1]:
        raise ValueError(
            f"output_padding {(oh, ow)} must be smaller than stride {layer.stride} componentwise"
        )
    kh, kw = layer.kernel_size
    h = transposed_output_size(y.shape[2], kh, layer.stride[0], layer.dilation[0], layer.padding[0], oh)
    w = transposed_output_size(y.shape[3], kw, layer.stride[1], layer.dilation[1], layer.padding[1], ow)
    if h < 1 or w < 1:
        raise ShapeError(f"non-positive transposed-conv output size {h}x{w}")
    return (y.shape[0], layer.in_channels, h, w)


def _check_transposed_input(y: np.ndarray, layer: ConvLayer, bias) -> None:
    _check_nchw(y)
    if layer.mode == "separable":
        raise ValueError("transposed_conv2d does not support separable layers")
    if y.shape[1] != layer.out_channels:
        raise ShapeError(
            f"transposed-conv input channel dimension (axis 1) is {y.shape[1]} but the "
            f"layer maps from {layer.out_channels} channels"
        )
    if bias is not None and tuple(np.shape(bias)) != (layer.in_channels,):
        raise ShapeError(f"transposed-conv bias must have {layer.in_channels} entries")


def transposed_conv2d(
    y: np.ndarray, layer: ConvLayer, output_padding=(0, 0), bias=None
) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``layer.weights`` is interpreted in forward-conv orientation, so a layer
    with weights ``[A, B, k, k]`` maps an A-channel map to a B-channel one.
    ``layer.bias`` is ignored; pass ``bias`` (length B) to add one.
    """
    y = np.asarray(y, dtype=np.float64)
    _check_transposed_input(y, layer, bias)
    shape = _transposed_out_shape(y, layer, output_padding)
    return _add_bias(_linear_backward_input(y, layer, shape), bias)


def transposed_conv2d_backward(
    y: np.ndarray, layer: ConvLayer, upstream: np.ndarray, output_padding=(0, 0), bias=None
) -> Grad:
    y = np.asarray(y, dtype=np.float64)
    _check_transposed_input(y, layer, bias)
    g = _check_upstream(upstream, _transposed_out_shape(y, layer, output_padding))
    # the forward map is C^T, so its adjoint is C evaluated on the cotangent
    gy = _linear_forward(g, layer)[:, :, : y.shape[2], : y.shape[3]]
    params = {"weights": _linear_backward_weights(g, y, layer)}
    if bias is not None:
        params["bias"] = g.sum(axis=(0, 2, 3))
    return Grad((gy,), params)


def avg_pool_global(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_nchw(x)
    return x.mean(axis=(2, 3), keepdims=True)


def avg_pool_global_backward(x: np.ndarray, upstream: np.ndarray) -> Grad:
    x = np.asarray(x)
    _check_nchw(x)
    g = _check_upstream(upstream, x.shape[:2] + (1, 1))
    hw = x.shape[2] * x.shape[3]
    return Grad((np.broadcast_to(g / hw, x.shape).copy(),))


def broadcast_hw(x: np.ndarray, h: int, w: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    _check_nchw(x)
    if x.shape[2:] != (1, 1):
        raise ShapeError(f"broadcast_hw needs 1x1 spatial input, got {x.shape[2]}x{x.shape[3]}")
    return np.broadcast_to(x, x.shape[:2] + (h, w)).copy()


def broadcast_hw_backward(x: np.ndarray, h: int, w: int, upstream: np.ndarray) -> Grad:
    x = np.asarray(x)
    g = _check_upstream(upstream, x.shape[:2] + (h, w))
    return Grad((g.sum(axis=(2, 3), keepdims=True),))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> Grad:
    x = np.asarray(x)
    g = _check_upstream(upstream, x.shape)
    # subgradient at 0 is 0
    return Grad((np.where(x > 0, g, 0.0),))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return a + b


def add_backward(a: np.ndarray, b: np.ndarray, upstream: np.ndarray) -> Grad:
    g = _check_upstream(upstream, np.shape(a))
    return Grad((g.copy(), g.copy()))


def concat_channels(inputs: Sequence[np.ndarray]) -> np.ndarray:
    inputs = [np.asarray(t, dtype=np.float64) for t in inputs]
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    for i, t in enumerate(inputs):
        _check_nchw(t, f"concat input {i}")
        if (t.shape[0],) + t.shape[2:] != (inputs[0].shape[0],) + inputs[0].shape[2:]:
            raise ShapeError(
                f"concat input {i} has N,H,W={(t.shape[0],) + t.shape[2:]}, expected "
                f"{(inputs[0].shape[0],) + inputs[0].shape[2:]}"
            )
    return np.concatenate(inputs, axis=1)


def concat_channels_backward(inputs: Sequence[np.ndarray], upstream: np.ndarray) -> Grad:
    widths = [np.shape(t)[1] for t in inputs]
    n, _, h, w = np.shape(inputs[0])
    g = _check_upstream(upstream, (n, sum(widths), h, w))
    bounds = np.cumsum(widths)[:-1]
    return Grad(tuple(p.copy() for p in np.split(g, bounds, axis=1)))


_BACKWARD: dict[Callable, Callable] = {
    conv2d: conv2d_backward,
    separable_conv2d: separable_conv2d_backward,
    transposed_conv2d: transposed_conv2d_backward,
    avg_pool_global: avg_pool_global_backward,
    broadcast_hw: broadcast_hw_backward,
    relu: relu_backward,
    add: add_backward,
}


def backward(op: Callable, inputs: Sequence, upstream: np.ndarray, **kwargs) -> Grad:
    """Generic entry point: ``backward(conv2d, (x, layer), g)``.

    ``inputs`` are the positional arguments the forward op was called with.
    """
    if op is concat_channels:
        return concat_channels_backward(inputs[0], upstream)
    try:
        fn = _BACKWARD[op]
    except KeyError:
        raise ValueError(f"no backward rule registered for {getattr(op, '__name__', op)!r}") from None
    return fn(*inputs, upstream, **kwargs)
