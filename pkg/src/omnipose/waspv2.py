"""WASPv2 head: a waterfall of dilated 3x3 convolutions fused with low-level features.

The waterfall feeds each dilated branch from the previous one, sums all
branch outputs with the broadcast global mean of the input, and applies a
1x1 convolution. The head then merges that result with 1x1-projected
low-level features and maps it to one heatmap per joint through two more
1x1 convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from omnipose import autodiff as ad
from omnipose.layers import LayerSpec, conv_layer, init_params
from omnipose.tensor import ConvLayer, ShapeError

FUSIONS = ("concat", "add")


@dataclass(frozen=True)
class WaspConfig:
    dilations: tuple[int, ...] = (1, 6, 12, 18)
    branch_channels: int = 48
    llf_channels: int = 48
    num_joints: int = 17
    fusion: str = "concat"
    separable: bool = False
    # ReLU between the trailing 1x1 convolutions
    head_relu: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        d = self.dilations
        if not d or any(x < 1 for x in d) or any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"dilations must be positive and strictly increasing, got {d}")
        if self.branch_channels < 1 or self.num_joints < 1 or self.llf_channels < 0:
            raise ValueError("branch_channels and num_joints must be positive, llf_channels >= 0")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.fusion == "add" and self.llf_channels not in (0, self.branch_channels):
            raise ValueError(
                f"fusion='add' needs llf_channels ({self.llf_channels}) equal to "
                f"branch_channels ({self.branch_channels})"
            )


@dataclass
class WaspWeights:
    branches: list[ConvLayer]
    post: ConvLayer
    fuse: ConvLayer
    final: ConvLayer
    llf: ConvLayer | None = None

    def layers(self) -> list[ConvLayer]:
        extra = [self.llf] if self.llf is not None else []
        return [*self.branches, self.post, *extra, self.fuse, self.final]


def layer_specs(cfg: WaspConfig, in_channels: int, llf_in: int, hw: tuple[int, int],
                prefix: str = "wasp") -> list[LayerSpec]:
    if in_channels != cfg.branch_channels:
        raise ShapeError(
            f"WASPv2 input width {in_channels} must equal branch_channels "
            f"{cfg.branch_channels} (branch outputs are summed with the pooled input)"
        )
    bc = cfg.branch_channels
    kind = "separable" if cfg.separable else "conv"
    specs = [
        LayerSpec(f"{prefix}.branch{i}", kind, in_channels if i == 0 else bc, bc,
                  kernel=3, dilation=d, padding=d, in_hw=hw, out_hw=hw)
        for i, d in enumerate(cfg.dilations)
    ]
    specs.append(LayerSpec(f"{prefix}.post", "conv", bc, bc, in_hw=hw, out_hw=hw))
    if cfg.llf_channels:
        specs.append(LayerSpec(f"{prefix}.llf", "conv", llf_in, cfg.llf_channels, in_hw=hw, out_hw=hw))
    fused = bc + cfg.llf_channels if cfg.fusion == "concat" else bc
    specs.append(LayerSpec(f"{prefix}.fuse", "conv", fused, bc, in_hw=hw, out_hw=hw))
    specs.append(LayerSpec(f"{prefix}.final", "conv", bc, cfg.num_joints, in_hw=hw, out_hw=hw))
    return specs


def weights_from_params(cfg: WaspConfig, params: Mapping, prefix: str = "wasp") -> WaspWeights:
    """Collect the head's ConvLayers from a flat ``name -> array/Var`` mapping."""
    def get(name, kernel=1, dilation=1):
        kind = "separable" if f"{prefix}.{name}.dw_weight" in params else "conv"
        spec = LayerSpec(f"{prefix}.{name}", kind, 0, 0, kernel=kernel, dilation=dilation, padding=dilation if kernel == 3 else 0)
        return conv_layer(spec, params)

    branches = [get(f"branch{i}", 3, d) for i, d in enumerate(cfg.dilations)]
    llf = get("llf") if cfg.llf_channels else None
    return WaspWeights(branches, get("post"), get("fuse"), get("final"), llf)


def init_weights(cfg: WaspConfig, in_channels: int, llf_in: int, seed: int | None = 0,
                 zero: bool = False) -> WaspWeights:
    specs = layer_specs(cfg, in_channels, llf_in, (1, 1))
    return weights_from_params(cfg, init_params(specs, seed, zero))


def receptive_fields(dilations: Sequence[int], kernel: int = 3) -> list[int]:
    """Receptive field (one side length) of each cascaded branch output."""
    rf, out = 1, []
    for d in dilations:
        rf += (kernel - 1) * d
        out.append(rf)
    return out


def _check_chain(f0, weights: WaspWeights) -> None:
    width = f0.shape[1]
    for i, layer in enumerate(weights.branches):
        if layer.in_channels != width:
            raise ShapeError(f"waterfall branch {i} expects {layer.in_channels} channels, receives {width}")
        width = layer.out_channels
    if width != f0.shape[1]:
        raise ShapeError(
            f"waterfall branches produce {width} channels but the pooled input has {f0.shape[1]}"
        )
    if weights.post.in_channels != width:
        raise ShapeError(f"post-sum 1x1 conv expects {weights.post.in_channels} channels, receives {width}")


def waterfall_node(f0, cfg: WaspConfig, weights: WaspWeights) -> ad.Var:
    f0 = ad.lift(f0)
    if len(weights.branches) != len(cfg.dilations):
        raise ShapeError(f"{len(weights.branches)} branch layers for {len(cfg.dilations)} dilations")
    _check_chain(f0, weights)
    h, w = f0.shape[2:]
    f, outs = f0, []
    for layer in weights.branches:
        f = ad.conv2d(f, layer)
        outs.append(f)
    pooled = ad.broadcast_hw(ad.avg_pool_global(f0), h, w)
    return ad.conv2d(ad.add(*outs, pooled), weights.post)


def waspv2_node(f0, f_llf, cfg: WaspConfig, weights: WaspWeights) -> ad.Var:
    f0, f_llf = ad.lift(f0), ad.lift(f_llf)
    if f0.shape[0] != f_llf.shape[0] or f0.shape[2:] != f_llf.shape[2:]:
        raise ShapeError(
            f"main input {f0.shape} and low-level features {f_llf.shape} must share N, H and W"
        )
    fw = waterfall_node(f0, cfg, weights)
    if weights.llf is not None:
        p = ad.conv2d(f_llf, weights.llf)
        fused = ad.concat_channels([p, fw]) if cfg.fusion == "concat" else ad.add(p, fw)
    else:
        fused = fw
    h = ad.conv2d(fused, weights.fuse)
    if cfg.head_relu:
        h = ad.relu(h)
    return ad.conv2d(h, weights.final)


def waterfall(f0: np.ndarray, cfg: WaspConfig, weights: WaspWeights) -> np.ndarray:
    return waterfall_node(f0, cfg, weights).value


def waspv2_forward(f0: np.ndarray, f_llf: np.ndarray, cfg: WaspConfig, weights: WaspWeights) -> np.ndarray:
    """Per-joint heatmaps ``[N, K, H, W]`` at the input resolution."""
    return waspv2_node(f0, f_llf, cfg, weights).value
