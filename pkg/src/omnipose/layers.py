"""Layer descriptions, deterministic initialization, and parameter/FLOP accounting.

Conventions: FLOPs are twice the multiply-accumulates; every bias adds one
FLOP per output element; the per-channel affine normalization costs two
FLOPs per element (scale and shift). Activations and element-wise sums are
free.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from omnipose.tensor import ConvLayer

KINDS = ("conv", "separable", "transposed", "affine", "blur")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    cin: int
    cout: int
    kernel: int = 1
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    in_hw: tuple[int, int] = (1, 1)
    out_hw: tuple[int, int] = (1, 1)
    bias: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k, ci, co = self.kernel, self.cin, self.cout
        if self.kind == "conv":
            shapes = {"weight": (co, ci, k, k)}
            if self.bias:
                shapes["bias"] = (co,)
        elif self.kind == "separable":
            shapes = {"dw_weight": (ci, 1, k, k), "pw_weight": (co, ci, 1, 1)}
            if self.bias:
                shapes["dw_bias"] = (ci,)
                shapes["pw_bias"] = (co,)
        elif self.kind == "transposed":
            shapes = {"weight": (ci, co, k, k)}
            if self.bias:
                shapes["bias"] = (co,)
        elif self.kind == "affine":
            shapes = {"scale": (ci,), "shift": (ci,)}
        else:
            shapes = {}
        return shapes


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    params: int = 0
    flops: int = 0
    layers: list[LayerCost] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "flops": self.flops,
            "layers": [{"name": l.name, "params": l.params, "flops": l.flops} for l in self.layers],
        }


def layer_cost(spec: LayerSpec) -> LayerCost:
    k2 = spec.kernel * spec.kernel
    ho, wo = spec.out_hw
    hi, wi = spec.in_hw
    out_px = ho * wo
    b = 1 if spec.bias else 0
    if spec.kind == "conv":
        macs = spec.cout * spec.cin * k2
        params = macs + b * spec.cout
        flops = 2 * macs * out_px + b * spec.cout * out_px
    elif spec.kind == "separable":
        dw, pw = spec.cin * k2, spec.cout * spec.cin
        params = dw + pw + b * (spec.cin + spec.cout)
        flops = 2 * (dw + pw) * out_px + b * (spec.cin + spec.cout) * out_px
    elif spec.kind == "transposed":
        macs = spec.cin * spec.cout * k2
        params = macs + b * spec.cout
        flops = 2 * macs * hi * wi + b * spec.cout * out_px
    elif spec.kind == "affine":
        params = 2 * spec.cin
        flops = 2 * spec.cin * out_px
    else:
        params = 0
        flops = 2 * k2 * spec.cin * out_px + 2 * spec.cin * out_px
    return LayerCost(spec.name, params, flops)


def count_layers(specs: Iterable[LayerSpec]) -> CostReport:
    report = CostReport()
    for spec in specs:
        c = layer_cost(spec)
        report.layers.append(c)
        report.params += c.params
        report.flops += c.flops
    return report


def reduction(standard: CostReport, lite: CostReport) -> dict[str, float]:
    """Fractional reduction of params and FLOPs going from ``standard`` to ``lite``."""
    def frac(a, b):
        return 0.0 if a == 0 else 1.0 - b / a

    return {"params": frac(standard.params, lite.params), "flops": frac(standard.flops, lite.flops)}


def conv_layer(spec: LayerSpec, params: Mapping) -> ConvLayer:
    """Assemble the ConvLayer for a conv/separable/transposed spec.

    ``params`` maps ``"<spec.name>.<param>"`` to arrays or graph nodes. A
    transposed layer's bias is not stored on the ConvLayer; fetch it with
    ``params[f"{spec.name}.bias"]``.
    """
    p = lambda key: params.get(f"{spec.name}.{key}")
    geo = dict(stride=spec.stride, dilation=spec.dilation, padding=spec.padding)
    if spec.kind == "conv":
        mode = "pointwise" if spec.kernel == 1 else "standard"
        return ConvLayer(p("weight"), p("bias"), mode=mode, **geo)
    if spec.kind == "separable":
        return ConvLayer(p("dw_weight"), p("dw_bias"), mode="separable",
                         pointwise_weights=p("pw_weight"), pointwise_bias=p("pw_bias"), **geo)
    if spec.kind == "transposed":
        return ConvLayer(p("weight"), **geo)
    raise ValueError(f"layer {spec.name!r} of kind {spec.kind!r} is not a convolution")


def init_params(specs: Iterable[LayerSpec], seed: int | None = 0, zero: bool = False) -> dict[str, np.ndarray]:
    """Deterministic parameter initialization, in spec order.

    Weights are uniform in ``[-b, b]`` with ``b = sqrt(1 / fan_in)``; biases
    and affine shifts start at 0, affine scales at 1. ``zero=True`` zeroes
    everything, scales included.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for spec in specs:
        for key, shape in spec.param_shapes().items():
            name = f"{spec.name}.{key}"
            if zero:
                params[name] = np.zeros(shape)
            elif key.endswith("weight"):
                fan_in = shape[0] * shape[2] * shape[3] if spec.kind == "transposed" else int(np.prod(shape[1:]))
                bound = np.sqrt(1.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
            elif key == "scale":
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
    return params
