"""Mini multi-resolution backbone + WASPv2 head, its costs and training helpers.

The backbone is a small stand-in for a high-resolution network: a stride-4
stem, parallel branches at increasing downsampling factors, and exchange
blocks that fuse every branch into every other one. Down-fusions use strided
3x3 convolutions; up-fusions use Gaussian-modulated deconvolutions. The
stride-4 branch feeds the WASPv2 head, and the stem output serves as its
low-level features.

Parameter names are ``<layer>.<param>``; every layer and its geometry is
enumerated once by :func:`layer_specs`, which drives initialization, cost
counting and the forward pass alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from omnipose import autodiff as ad
from omnipose import gdm, waspv2
from omnipose.gdm import GdmConfig
from omnipose.layers import CostReport, LayerSpec, conv_layer, count_layers, init_params
from omnipose.tensor import ShapeError
from omnipose.waspv2 import WaspConfig


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 64
    branches: tuple[tuple[int, int], ...] = ((48, 4), (96, 8))
    num_exchange_blocks: int = 1
    lite: bool = False
    gdm: GdmConfig = field(default_factory=GdmConfig)
    # up-transitions ("b1->b0", ...) that skip the Gaussian modulation
    gdm_off: tuple[str, ...] = ()

    def __post_init__(self):
        branches = tuple((int(w), int(d)) for w, d in self.branches)
        object.__setattr__(self, "branches", branches)
        object.__setattr__(self, "gdm_off", tuple(self.gdm_off))
        if not branches:
            raise ValueError("backbone needs at least one branch")
        divs = [d for _, d in branches]
        if divs[0] != 4:
            raise ValueError(f"the high-resolution branch must have divisor 4 (stride-4 stem), got {divs[0]}")
        if not all(_is_pow2(d) for d in divs) or any(b <= a for a, b in zip(divs, divs[1:])):
            raise ValueError(f"branch divisors must be strictly increasing powers of 2, got {divs}")
        if any(w < 1 for w, _ in branches) or self.stem_channels < 1:
            raise ValueError("channel widths must be positive")
        if self.num_exchange_blocks < 1:
            raise ValueError("num_exchange_blocks must be >= 1")
        u = self.gdm.upsample
        if u.output_size(5) != 10 or u.output_size(8) != 16:
            raise ValueError(f"up-transition geometry {u} must exactly double the spatial size")


@dataclass(frozen=True)
class ModelConfig:
    """Assembly record. ``backbone=None`` describes the empty model (no layers)."""

    backbone: BackboneConfig | None = field(default_factory=BackboneConfig)
    wasp: WaspConfig | None = field(default_factory=WaspConfig)
    input_size: tuple[int, int] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if (self.backbone is None) != (self.wasp is None):
            raise ValueError("backbone and wasp must both be present or both absent")
        if self.backbone is None:
            return
        largest = self.backbone.branches[-1][1]
        h, w = self.input_size
        if h % largest or w % largest:
            raise ValueError(f"input size {self.input_size} must be divisible by the largest divisor {largest}")
        if self.wasp.branch_channels != self.backbone.branches[0][0]:
            raise ValueError(
                f"wasp.branch_channels ({self.wasp.branch_channels}) must equal the "
                f"high-resolution branch width ({self.backbone.branches[0][0]})"
            )

    @property
    def heatmap_stride(self) -> int:
        return self.backbone.branches[0][1] if self.backbone else 1

    @property
    def heatmap_size(self) -> tuple[int, int]:
        s = self.heatmap_stride
        return self.input_size[0] // s, self.input_size[1] // s

    @property
    def num_joints(self) -> int:
        return self.wasp.num_joints if self.wasp else 0


def _steps(ratio: int) -> int:
    return int(ratio).bit_length() - 1


def layer_specs(cfg: ModelConfig) -> list[LayerSpec]:
    if cfg.backbone is None:
        return []
    bb = cfg.backbone
    H, W = cfg.input_size
    conv3 = "separable" if bb.lite else "conv"
    specs: list[LayerSpec] = []

    def conv(name, cin, cout, stride, in_hw):
        out_hw = (in_hw[0] // stride, in_hw[1] // stride)
        specs.append(LayerSpec(name, conv3, cin, cout, 3, stride, 1, 1, in_hw, out_hw))
        specs.append(LayerSpec(f"{name}.norm", "affine", cout, cout, in_hw=out_hw, out_hw=out_hw))
        return out_hw

    hw = conv("stem1", 3, bb.stem_channels, 2, (H, W))
    hw = conv("stem2", bb.stem_channels, bb.stem_channels, 2, hw)
    res = {i: (H // d, W // d) for i, (_, d) in enumerate(bb.branches)}
    widths = [w for w, _ in bb.branches]

    conv("transition.b0.0", bb.stem_channels, widths[0], 1, res[0])
    for i in range(1, len(bb.branches)):
        hw, cin = res[i - 1], widths[i - 1]
        for t in range(_steps(bb.branches[i][1] // bb.branches[i - 1][1])):
            hw = conv(f"transition.b{i}.{t}", cin, widths[i], 2, hw)
            cin = widths[i]

    u, g = bb.gdm.upsample, bb.gdm
    for b in range(bb.num_exchange_blocks):
        for i, w in enumerate(widths):
            conv(f"block{b}.unit.b{i}", w, w, 1, res[i])
        for i in range(len(widths)):
            for j in range(len(widths)):
                name = f"block{b}.fuse.b{j}_b{i}"
                cin = widths[j]
                if j > i:
                    hw = res[j]
                    for t in range(_steps(bb.branches[j][1] // bb.branches[i][1])):
                        out = (hw[0] * 2, hw[1] * 2)
                        specs.append(LayerSpec(f"{name}.{t}", "transposed", cin, widths[i], u.kernel_size,
                                               u.stride, 1, u.padding, hw, out))
                        if g.enabled and f"b{j}->b{i}" not in bb.gdm_off:
                            specs.append(LayerSpec(f"{name}.{t}.gdm", "blur", widths[i], widths[i],
                                                   g.kernel_size, 1, 1, g.kernel_size // 2, out, out, bias=False))
                        hw, cin = out, widths[i]
                elif j < i:
                    hw = res[j]
                    for t in range(_steps(bb.branches[i][1] // bb.branches[j][1])):
                        hw = conv(f"{name}.{t}", cin, widths[i], 2, hw)
                        cin = widths[i]
    specs += waspv2.layer_specs(cfg.wasp, widths[0], bb.stem_channels, res[0])
    return specs


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = None, zero: bool = False) -> "Model":
        seed = config.seed if seed is None else seed
        return cls(config, init_params(layer_specs(config), seed, zero))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}


def forward_node(image, cfg: ModelConfig, params: Mapping, specs: list[LayerSpec] | None = None) -> ad.Var:
    """Build the graph; ``params`` values may be arrays or :class:`~omnipose.autodiff.Var`."""
    if cfg.backbone is None:
        raise ValueError("the empty model has no forward pass")
    image = ad.lift(image)
    H, W = cfg.input_size
    if image.value.ndim != 4 or image.shape[1:] != (3, H, W):
        raise ShapeError(f"image must be [N, 3, {H}, {W}] for this model, got {image.shape}")
    bb = cfg.backbone
    by_name = {s.name: s for s in (specs or layer_specs(cfg))}

    def conv_bn_relu(name, x, relu=True):
        x = ad.conv2d(x, conv_layer(by_name[name], params))
        x = ad.affine(x, params[f"{name}.norm.scale"], params[f"{name}.norm.shift"])
        return ad.relu(x) if relu else x

    stem = conv_bn_relu("stem2", conv_bn_relu("stem1", image))
    xs = [conv_bn_relu("transition.b0.0", stem)]
    for i in range(1, len(bb.branches)):
        x, t = xs[-1], 0
        while f"transition.b{i}.{t}" in by_name:
            x = conv_bn_relu(f"transition.b{i}.{t}", x)
            t += 1
        xs.append(x)

    n = len(xs)
    for b in range(bb.num_exchange_blocks):
        xs = [conv_bn_relu(f"block{b}.unit.b{i}", x) for i, x in enumerate(xs)]
        fused = []
        for i in range(n):
            terms = []
            for j in range(n):
                y, name, t = xs[j], f"block{b}.fuse.b{j}_b{i}", 0
                if j > i:
                    while f"{name}.{t}" in by_name:
                        layer = conv_layer(by_name[f"{name}.{t}"], params)
                        bias = params.get(f"{name}.{t}.bias")
                        cfg_t = bb.gdm if f"{name}.{t}.gdm" in by_name else GdmConfig(
                            bb.gdm.kernel_size, bb.gdm.sigma_mod, bb.gdm.upsample, enabled=False)
                        y = gdm.gdm_upsample_node(y, cfg_t, layer, bias)
                        t += 1
                elif j < i:
                    last = _steps(bb.branches[i][1] // bb.branches[j][1]) - 1
                    while f"{name}.{t}" in by_name:
                        y = conv_bn_relu(f"{name}.{t}", y, relu=t < last)
                        t += 1
                terms.append(y)
            fused.append(ad.relu(ad.add(*terms)))
        xs = fused

    weights = waspv2.weights_from_params(cfg.wasp, params)
    return waspv2.waspv2_node(xs[0], stem, cfg.wasp, weights)


def forward(image: np.ndarray, model: Model) -> np.ndarray:
    """Heatmaps ``[N, K, H/stride, W/stride]`` for a batch of images."""
    return forward_node(image, model.config, model.params).value


def count_cost(model: Model | ModelConfig, input_size: tuple[int, int] | None = None) -> CostReport:
    cfg = model.config if isinstance(model, Model) else model
    if input_size is not None and cfg.backbone is not None:
        cfg = ModelConfig(cfg.backbone, cfg.wasp, tuple(input_size), cfg.seed)
    return count_layers(layer_specs(cfg))


def lite_variant(cfg: ModelConfig, lite: bool = True) -> ModelConfig:
    """Same topology with every 3x3 convolution (WASPv2 branches included) separable or standard."""
    if cfg.backbone is None:
        return cfg
    from dataclasses import replace

    return replace(cfg, backbone=replace(cfg.backbone, lite=lite), wasp=replace(cfg.wasp, separable=lite))


def lr_schedule(epoch: int) -> float:
    """Step schedule: 1e-3, dropped tenfold at epochs 170 and 200."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < 170:
        return 1e-3
    if epoch < 200:
        return 1e-4
    return 1e-5


def mse_heatmap_loss(pred: np.ndarray, target: np.ndarray, joint_mask=None) -> tuple[float, np.ndarray]:
    """Mean squared heatmap error over unmasked joints, and its gradient w.r.t. ``pred``.

    ``joint_mask`` is ``[K]`` or ``[N, K]`` booleans; ``True`` keeps the joint.
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    weight = None
    if joint_mask is not None:
        m = np.asarray(joint_mask, dtype=np.float64)
        weight = m[None, :, None, None] if m.ndim == 1 else m[:, :, None, None]
    p = ad.Var(pred, requires_grad=True)
    loss = ad.mse(p, target, weight)
    loss.backward()
    return float(loss.value), p.grad


def loss_and_grads(model: Model, image: np.ndarray, target: np.ndarray, joint_mask=None):
    params = {k: ad.param(v, k) for k, v in model.params.items()}
    pred = forward_node(image, model.config, params)
    weight = None
    if joint_mask is not None:
        m = np.asarray(joint_mask, dtype=np.float64)
        weight = m[None, :, None, None] if m.ndim == 1 else m[:, :, None, None]
    loss = ad.mse(pred, target, weight)
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in params.items()}
    return float(loss.value), grads


def train(model: Model, image: np.ndarray, target: np.ndarray, steps: int, lr: float | None = None,
          joint_mask=None, optimizer: str = "adam") -> list[float]:
    """Overfit ``model`` to one batch; updates ``model.params`` in place.

    ``optimizer`` is ``"adam"`` (beta1 0.9, beta2 0.999, eps 1e-8) or ``"sgd"``.
    The learning rate defaults to the epoch-0 schedule value. Returns the
    loss before each step followed by the final loss.
    """
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    lr = lr_schedule(0) if lr is None else lr
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    losses = []
    for step in range(1, steps + 1):
        loss, grads = loss_and_grads(model, image, target, joint_mask)
        losses.append(loss)
        for k, g in grads.items():
            if optimizer == "sgd":
                update = g
            else:
                m1[k] = 0.9 * m1[k] + 0.1 * g
                m2[k] = 0.999 * m2[k] + 0.001 * g * g
                update = (m1[k] / (1 - 0.9**step)) / (np.sqrt(m2[k] / (1 - 0.999**step)) + 1e-8)
            model.params[k] = model.params[k] - lr * update
    losses.append(loss_and_grads(model, image, target, joint_mask)[0])
    return losses
