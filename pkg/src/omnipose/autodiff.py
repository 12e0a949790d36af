"""Minimal reverse-mode differentiation over the tensor-core operators.

A :class:`Var` wraps a float64 array and remembers how it was produced.
Calling :meth:`Var.backward` on a scalar node walks the graph in reverse
topological order and accumulates ``.grad`` on every node that requires it.
The local derivative rules are the ``*_backward`` functions of
:mod:`omnipose.tensor`, so the graph and the functional API can never drift.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Iterable, Sequence

import numpy as np

from omnipose import tensor as T


class Var:
    __slots__ = ("value", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Var"] = (), backward: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, seed: np.ndarray | None = None) -> None:
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node.parents, grads):
                if p.requires_grad and g is not None:
                    p._accumulate(g)


def param(value, name: str | None = None) -> Var:
    return Var(value, requires_grad=True, name=name)


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _value(x):
    return x.value if isinstance(x, Var) else (None if x is None else np.asarray(x, dtype=np.float64))


_LAYER_FIELDS = ("weights", "bias", "pointwise_weights", "pointwise_bias")


def _layer_nodes(layer: T.ConvLayer) -> tuple[T.ConvLayer, list[tuple[str, Var]]]:
    """Split a layer into a value-only copy plus its Var-valued fields."""
    values, nodes = {}, []
    for f in _LAYER_FIELDS:
        v = getattr(layer, f)
        if isinstance(v, Var):
            nodes.append((f, v))
        values[f] = _value(v)
    return replace(layer, **values), nodes


def conv2d(x, layer: T.ConvLayer) -> Var:
    x = lift(x)
    concrete, nodes = _layer_nodes(layer)
    out = T.conv2d(x.value, concrete)

    def back(g):
        grad = T.conv2d_backward(x.value, concrete, g)
        return (grad.inputs[0],) + tuple(grad.params.get(f) for f, _ in nodes)

    return Var(out, (x,) + tuple(v for _, v in nodes), back)


def transposed_conv2d(y, layer: T.ConvLayer, output_padding=(0, 0), bias=None) -> Var:
    y = lift(y)
    concrete, nodes = _layer_nodes(layer)
    nodes = [(f, v) for f, v in nodes if f == "weights"]
    b = _value(bias)
    out = T.transposed_conv2d(y.value, concrete, output_padding, b)
    extra = [bias] if isinstance(bias, Var) else []

    def back(g):
        grad = T.transposed_conv2d_backward(y.value, concrete, g, output_padding, b)
        gs = (grad.inputs[0], grad.params["weights"]) if nodes else (grad.inputs[0],)
        return gs + ((grad.params["bias"],) if extra else ())

    return Var(out, (y,) + tuple(v for _, v in nodes) + tuple(extra), back)


def relu(x) -> Var:
    x = lift(x)
    return Var(T.relu(x.value), (x,), lambda g: T.relu_backward(x.value, g).inputs)


def add(*xs) -> Var:
    xs = [lift(x) for x in xs]
    out = xs[0].value
    for x in xs[1:]:
        out = T.add(out, x.value)
    return Var(out, xs, lambda g: tuple(g for _ in xs))


def concat_channels(xs: Iterable) -> Var:
    xs = [lift(x) for x in xs]
    out = T.concat_channels([x.value for x in xs])
    return Var(out, xs, lambda g: T.concat_channels_backward([x.value for x in xs], g).inputs)


def avg_pool_global(x) -> Var:
    x = lift(x)
    return Var(T.avg_pool_global(x.value), (x,), lambda g: T.avg_pool_global_backward(x.value, g).inputs)


def broadcast_hw(x, h: int, w: int) -> Var:
    x = lift(x)
    return Var(T.broadcast_hw(x.value, h, w), (x,),
               lambda g: T.broadcast_hw_backward(x.value, h, w, g).inputs)


def affine(x, scale, shift) -> Var:
    """Per-channel ``x * scale + shift`` (fixed-parameter normalization)."""
    x, scale, shift = lift(x), lift(scale), lift(shift)
    s = scale.value[None, :, None, None]
    out = x.value * s + shift.value[None, :, None, None]

    def back(g):
        return g * s, (g * x.value).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Var(out, (x, scale, shift), back)


def mse(pred, target, weight: np.ndarray | None = None) -> Var:
    """Mean squared error; ``weight`` (broadcastable 0/1 mask) selects terms.

    The mean is taken over the selected elements; with nothing selected the
    loss is 0 and the gradient vanishes.
    """
    pred = lift(pred)
    t = _value(target)
    diff = pred.value - t
    mask = np.ones_like(diff) if weight is None else np.broadcast_to(weight, diff.shape).astype(np.float64)
    count = mask.sum()
    if count == 0:
        return Var(0.0, (pred,), lambda g: (np.zeros_like(diff),))
    loss = float((mask * diff**2).sum() / count)
    return Var(loss, (pred,), lambda g: (g * 2.0 * mask * diff / count,))
