"""Quick built-in verification battery behind ``omnipose selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from omnipose import autodiff as ad
from omnipose import codec, gdm, metrics, oracles, waspv2
from omnipose import tensor as T
from omnipose.layers import LayerSpec, layer_cost


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _conv_oracle(rng) -> str:
    worst = 0.0
    for _ in range(12):
        s, d = int(rng.integers(1, 3)), int(rng.choice([1, 2, 6]))
        p = int(rng.integers(0, d + 1))
        size = d * 2 + 4 + int(rng.integers(0, 4))
        x = rng.normal(size=(1, 2, size, size))
        w, b = rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        got = T.conv2d(x, T.ConvLayer(w, b, s, d, p))
        ref = oracles.conv2d_loops(x, w, b, (s, s), (d, d), (p, p))
        worst = max(worst, oracles.relative_error(got, ref))
    assert worst < 1e-9, f"max relative error {worst:.3g}"
    return f"max relative error {worst:.2e}"


def _adjoint(rng) -> str:
    worst = 0.0
    for _ in range(10):
        s, d = int(rng.integers(1, 3)), int(rng.choice([1, 2, 6]))
        layer = T.ConvLayer(rng.normal(size=(3, 2, 3, 3)), stride=s, dilation=d, padding=d)
        x = rng.normal(size=(1, 2, 9, 9))
        y = rng.normal(size=T.conv2d(x, layer).shape)
        op = (9 + 2 * d - 2 * d - 1) % s
        lhs = np.sum(T.conv2d(x, layer) * y)
        rhs = np.sum(x * T.transposed_conv2d(y, layer, (op, op)))
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))
    assert worst < 1e-8, f"adjoint gap {worst:.3g}"
    return f"max normalized gap {worst:.2e}"


def _gradients(rng) -> str:
    x = rng.normal(size=(1, 2, 6, 6))
    seps = T.ConvLayer(rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2), 1, 2, 2, "separable",
                       rng.normal(size=(3, 2, 1, 1)), rng.normal(size=3))
    worst = 0.0
    for layer in (T.ConvLayer(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), 2, 1, 1), seps):
        g = rng.normal(size=T.conv2d(x, layer).shape)
        grad = T.conv2d_backward(x, layer, g)
        f = lambda: float(np.sum(T.conv2d(x, layer) * g))
        worst = max(worst, oracles.relative_error(grad.inputs[0], oracles.numeric_gradient(f, x)))
        for key, arr in grad.params.items():
            num = oracles.numeric_gradient(f, getattr(layer, key))
            worst = max(worst, oracles.relative_error(arr, num))
    plane = ad.param(rng.uniform(0, 1, size=(1, 2, 8, 8)))
    cot = rng.normal(size=plane.shape)
    out = gdm.modulate_node(plane, gdm.GdmConfig(kernel_size=3, sigma_mod=1.0))
    out.backward(cot)
    f = lambda: float(np.sum(gdm.modulate(plane.value, gdm.GdmConfig(kernel_size=3, sigma_mod=1.0)) * cot))
    worst = max(worst, oracles.relative_error(plane.grad, oracles.numeric_gradient(f, plane.value)))
    assert worst < 1e-4, f"relative error {worst:.3g}"
    return f"max relative error {worst:.2e}"


def _wasp(rng) -> str:
    cfg = waspv2.WaspConfig(branch_channels=4, llf_channels=3, num_joints=2)
    w = waspv2.init_weights(cfg, 4, 5, seed=int(rng.integers(1 << 30)))
    f0, llf = rng.normal(size=(1, 4, 20, 20)), rng.normal(size=(1, 5, 20, 20))
    out = waspv2.waspv2_forward(f0, llf, cfg, w)
    assert out.shape == (1, 2, 20, 20), out.shape
    f, acc = f0, T.broadcast_hw(T.avg_pool_global(f0), 20, 20)
    for layer in w.branches:
        f = T.conv2d(f, layer)
        acc = T.add(acc, f)
    fw = T.conv2d(acc, w.post)
    ref = T.conv2d(T.conv2d(T.concat_channels([T.conv2d(llf, w.llf), fw]), w.fuse), w.final)
    err = oracles.relative_error(out, ref)
    assert err < 1e-9, f"relative error {err:.3g}"
    return f"shape preserved, oracle relative error {err:.2e}"


def _gdm_range(rng) -> str:
    worst = 0.0
    for _ in range(20):
        fd = rng.normal(size=(1, 1, 12, 12))
        fg = gdm.modulate(fd)
        worst = max(worst, abs(fg.max() - fd.max()), abs(fg.min()))
    assert worst < 1e-12, f"range violation {worst:.3g}"
    return f"max deviation {worst:.2e}"


def _codec(rng) -> str:
    meta = codec.HeatmapMeta(stride=1, sigma=3.0)
    worst = 0.0
    for _ in range(100):
        cx, cy = rng.uniform(9, 23, size=2)
        ann = codec.PoseAnnotation([codec.Keypoint(cx, cy, 2)])
        hm, _ = codec.encode(ann, meta, 32, 32)
        kp, _ = codec.decode(hm, meta, "taylor")[0]
        worst = max(worst, np.hypot(kp.x - cx, kp.y - cy))
    assert worst <= 0.1, f"round-trip error {worst:.3g}"
    return f"max round-trip error {worst:.2e} px"


def _metrics(rng) -> str:
    gt = codec.PoseAnnotation([codec.Keypoint(0, 0, 2), codec.Keypoint(5, 5, 2)], area=100.0, id=1)
    pred = codec.PoseAnnotation([codec.Keypoint(1, 0, 2), codec.Keypoint(5, 7, 2)], score=1.0, id=1)
    v = metrics.oks(pred, gt, metrics.OksConfig(k=(0.1, 0.2)))
    assert abs(v - np.exp(-0.5)) < 1e-9, v
    rep = metrics.match_and_ap({1: [codec.PoseAnnotation(gt.keypoints, 100.0, score=0.9)]}, {1: [gt]},
                               metrics.OksConfig(k=(0.1, 0.2)))
    assert rep.ap == 1.0 and rep.ar == 1.0, (rep.ap, rep.ar)
    return f"OKS fixture {v:.6f}, identity AP {rep.ap}"


def _cost(rng) -> str:
    std = layer_cost(LayerSpec("c", "conv", 48, 48, 3, in_hw=(64, 64), out_hw=(64, 64), bias=False))
    sep = layer_cost(LayerSpec("c", "separable", 48, 48, 3, in_hw=(64, 64), out_hw=(64, 64), bias=False))
    assert std.params == 20736 and sep.params == 2736, (std.params, sep.params)
    return f"separable/standard params {sep.params / std.params:.4f}"


CHECKS: list[tuple[str, Callable]] = [
    ("conv2d vs loop oracle", _conv_oracle),
    ("transposed conv adjoint identity", _adjoint),
    ("finite-difference gradients", _gradients),
    ("WASPv2 composition", _wasp),
    ("GDM range contract", _gdm_range),
    ("codec round trip", _codec),
    ("metric fixtures", _metrics),
    ("cost model", _cost),
]


def run(seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            detail, ok = fn(rng), True
        except Exception as exc:  # a failing check must not stop the battery
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results
