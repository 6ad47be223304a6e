"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Node` wraps a value and remembers how it was produced. Calling
:func:`backward` on a scalar node walks the recorded graph in reverse
topological order and accumulates adjoints into every reachable node.

Layers are small descriptor dataclasses holding their parameters as leaf
nodes; :func:`layer_forward` dispatches on the descriptor type.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when an operand shape does not conform to a layer."""


class Node:
    __slots__ = ("value", "_grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn: BackwardFn | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._grad = None
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = g

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.shape} dtype={self.dtype}>"


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _topological_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``node.grad`` for every reachable node.

    Gradients add onto whatever is already stored, so calling this twice
    without :meth:`Node.zero_grad` doubles them.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    adjoint = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node._grad is None else node._grad + g
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(a: Node, c: float) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,))


def sum_all(a: Node) -> Node:
    return Node(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def lerp(a: Node, b, weight: float) -> Node:
    """``weight * b + (1 - weight) * a``; ``b`` may be a plain array (no gradient)."""
    w = weight
    if isinstance(b, Node):
        return Node(w * b.value + (1 - w) * a.value, (a, b), lambda g: (g * (1 - w), g * w))
    b = np.asarray(b)
    return Node(w * b + (1 - w) * a.value, (a,), lambda g: (g * (1 - w),))


def take_batch(a: Node, index: np.ndarray) -> Node:
    """Reorder the leading (batch) axis by ``index``."""
    index = np.asarray(index)

    def bw(g):
        out = np.zeros_like(a.value)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), bw)


# ---------------------------------------------------------------------------
# layers

@dataclass
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    weight: Node | None = field(default=None, repr=False)
    bias: Node | None = field(default=None, repr=False)

    def param_shapes(self) -> dict:
        return {"weight": (self.out_channels, self.in_channels, self.kernel, self.kernel),
                "bias": (self.out_channels,)}

    def fan_in(self) -> int:
        return self.in_channels * self.kernel * self.kernel

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"{self}: expected {self.in_channels} input channels, got input shape {shape}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self}: input shape {shape} too small for kernel")
        return (self.out_channels, ho, wo)


@dataclass
class Dense:
    in_features: int
    out_features: int
    weight: Node | None = field(default=None, repr=False)
    bias: Node | None = field(default=None, repr=False)

    def param_shapes(self) -> dict:
        return {"weight": (self.in_features, self.out_features), "bias": (self.out_features,)}

    def fan_in(self) -> int:
        return self.in_features

    def output_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.in_features:
            raise ShapeError(f"{self}: expected ({self.in_features},) features, got input shape {shape}")
        return (self.out_features,)


@dataclass
class ReLU:
    def output_shape(self, shape):
        return shape


@dataclass
class AvgPool2:
    def output_shape(self, shape):
        if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
            raise ShapeError(f"{self}: needs an even spatial size, got input shape {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)


@dataclass
class Flatten:
    def output_shape(self, shape):
        return (int(np.prod(shape)),)


Layer = Conv2d | Dense | ReLU | AvgPool2 | Flatten


def init_layer(layer: Layer, rng: np.random.Generator, dtype=np.float32) -> None:
    """Fan-in scaled normal weights (std sqrt(2/fan_in)), zero biases."""
    if not isinstance(layer, (Conv2d, Dense)):
        return
    shapes = layer.param_shapes()
    std = math.sqrt(2.0 / layer.fan_in())
    layer.weight = parameter(rng.normal(0.0, std, size=shapes["weight"]).astype(dtype))
    layer.bias = parameter(np.zeros(shapes["bias"], dtype=dtype))


def conv2d(x: Node, weight: Node, bias: Node, stride: int = 1, padding: int = 0) -> Node:
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    xv = x.value
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xv, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = weight.value.reshape(cout, -1)
    out = (cols @ wmat.T + bias.value).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    padded_shape = xv.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        if padding:
            gx = gx[:, :, padding:-padding, padding:-padding]
        return gx, gw, gb

    return Node(np.ascontiguousarray(out), (x, weight, bias), bw)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def avg_pool2(x: Node) -> Node:
    v = x.value
    out = (v[:, :, 0::2, 0::2] + v[:, :, 1::2, 0::2] + v[:, :, 0::2, 1::2] + v[:, :, 1::2, 1::2]) * 0.25

    def bw(g):
        q = g * 0.25
        return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

    return Node(out, (x,), bw)


def flatten(x: Node) -> Node:
    shape = x.shape
    return Node(x.value.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def dense(x: Node, weight: Node, bias: Node) -> Node:
    return Node(x.value @ weight.value + bias.value, (x, weight, bias),
                lambda g: (g @ weight.value.T, x.value.T @ g, g.sum(axis=0)))


def layer_forward(x: Node, layer: Layer) -> Node:
    """Apply one layer descriptor, checking the input shape first."""
    layer.output_shape(x.shape[1:])
    if isinstance(layer, Conv2d):
        return conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
    if isinstance(layer, ReLU):
        return relu(x)
    if isinstance(layer, AvgPool2):
        return avg_pool2(x)
    if isinstance(layer, Flatten):
        return flatten(x)
    if isinstance(layer, Dense):
        return dense(x, layer.weight, layer.bias)
    raise TypeError(f"unknown layer {layer!r}")


def cross_entropy(logits: Node, labels) -> Node:
    """Mean negative log-softmax of the true class, max-shifted for stability."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n, k = z.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logits rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got {labels.min()}..{labels.max()}")
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("cross_entropy: non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - shifted[rows, labels])

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return Node(np.asarray(loss, dtype=z.dtype), (logits,), bw)
