"""Minimal reverse-mode differentiation over NumPy arrays.

Only the operators the velocity U-Net needs have adjoints. Each op returns a
new :class:`Node` whose ``_backward`` pushes the node's gradient into its
parents; :func:`backward` runs those closures in reverse topological order.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Node:
    __slots__ = ("value", "grad", "parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Node({self.name or ''}{self.value.shape})"


def real(value) -> np.ndarray:
    """float64 array, except that extended-precision input stays extended."""
    arr = np.asarray(value)
    return arr if arr.dtype == np.longdouble else arr.astype(np.float64, copy=False)


def leaf(value, name=None) -> Node:
    return Node(real(value), name=name)


def topo_order(root_nodes) -> list[Node]:
    order, seen = [], set()
    stack = [(n, False) for n in root_nodes]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(order: list[Node], outputs: list[Node], grads: list[np.ndarray]) -> None:
    """Reverse sweep. ``order`` is the topological order covering ``outputs``."""
    for node in order:
        node.grad = None
    for out, g in zip(outputs, grads):
        out.accumulate(real(g))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


# ---------------------------------------------------------------- elementwise

def add(a: Node, b: Node) -> Node:
    def bw(out):
        a.accumulate(_unbroadcast(out.grad, a.shape))
        b.accumulate(_unbroadcast(out.grad, b.shape))
    return Node(a.value + b.value, (a, b), bw)


def scale(a: Node, k: float) -> Node:
    def bw(out):
        a.accumulate(k * out.grad)
    return Node(k * a.value, (a,), bw)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def silu(a: Node) -> Node:
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-x))
    def bw(out):
        a.accumulate(out.grad * (sig * (1.0 + x * (1.0 - sig))))
    return Node(x * sig, (a,), bw)


def reshape(a: Node, shape) -> Node:
    def bw(out):
        a.accumulate(out.grad.reshape(a.shape))
    return Node(a.value.reshape(shape), (a,), bw)


def concat(nodes: list[Node], axis: int = 1) -> Node:
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    def bw(out):
        for n, g in zip(nodes, np.split(out.grad, splits, axis=axis)):
            n.accumulate(g)
    return Node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), bw)


# ---------------------------------------------------------------- dense layers

def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    """x (B, in) @ w.T (in, out) + b."""
    def bw(out):
        g = out.grad
        x.accumulate(g @ w.value)
        w.accumulate(g.T @ x.value)
        if b is not None:
            b.accumulate(g.sum(axis=0))
    y = x.value @ w.value.T
    if b is None:
        return Node(y, (x, w), bw)
    return Node(y + b.value, (x, w, b), bw)


def index(a: Node, idx) -> Node:
    """Basic (non-fancy) indexing."""
    def bw(out):
        g = np.zeros(a.shape)
        g[idx] = out.grad
        a.accumulate(g)
    return Node(a.value[idx], (a,), bw)


def mean_hw(x: Node) -> Node:
    """Global average pool over the two trailing axes."""
    n = x.shape[-1] * x.shape[-2]
    def bw(out):
        x.accumulate(np.broadcast_to(out.grad[..., None, None] / n, x.shape).copy())
    return Node(x.value.mean(axis=(-2, -1)), (x,), bw)


# ---------------------------------------------------------------- convolution

def _pad_wrap(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="wrap")


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    B, Ci, H, W = x.shape
    Ho, Wo = H // stride, W // stride
    xp = _pad_wrap(x, k // 2)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : stride * Ho : stride, : stride * Wo : stride]
    # (Ci*k*k, B*Ho*Wo): the innermost copy runs along W
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(Ci * k * k, B * Ho * Wo)


def _conv(x: np.ndarray, w: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    B, _, H, W = x.shape
    Co, Ci, k, _ = w.shape
    cols = _im2col(x, k, stride)
    y = w.reshape(Co, Ci * k * k) @ cols
    return y.reshape(Co, B, H // stride, W // stride).transpose(1, 0, 2, 3), cols


def conv2d(x: Node, w: Node, b: Node, stride: int = 1) -> Node:
    """Periodic ('same' up to stride) 2-D convolution (cross-correlation).

    x: (B, Ci, H, W); w: (Co, Ci, k, k) with odd k; output (B, Co, H/s, W/s).
    """
    xv, wv = x.value, w.value
    B, Ci, H, W = xv.shape
    Co, _, k, _ = wv.shape
    if H % stride or W % stride:
        raise ValueError(f"grid {H}x{W} not divisible by stride {stride}")
    if k // 2 > min(H, W):
        raise ValueError(f"kernel {k} wider than grid {H}x{W}")
    y, cols = _conv(xv, wv, stride)
    y = y + b.value[None, :, None, None]

    def bw(out):
        g = out.grad
        gmat = g.transpose(1, 0, 2, 3).reshape(Co, -1)
        w.accumulate((gmat @ cols.T).reshape(wv.shape))
        b.accumulate(gmat.sum(axis=1))
        # adjoint of a periodic correlation: correlate the (zero-dilated) output
        # gradient with the flipped, transposed kernel
        if stride > 1:
            up = np.zeros((B, Co, H, W))
            up[:, :, ::stride, ::stride] = g
            g = up
        x.accumulate(_conv(g, wv[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), 1)[0])

    return Node(np.ascontiguousarray(y), (x, w, b), bw)


def upsample_nearest(x: Node) -> Node:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    def bw(out):
        g = out.grad
        x.accumulate(g[..., 0::2, 0::2] + g[..., 0::2, 1::2] + g[..., 1::2, 0::2] + g[..., 1::2, 1::2])
    return Node(x.value.repeat(2, axis=-2).repeat(2, axis=-1), (x,), bw)


# ---------------------------------------------------------------- normalization

def group_norm(x: Node, groups: int, gamma: Node | None = None, beta: Node | None = None,
               eps: float = 1e-5) -> Node:
    xv = x.value
    B, C, H, W = xv.shape
    if C % groups:
        raise ValueError(f"{C} channels not divisible into {groups} groups")
    xg = xv.reshape(B, groups, -1)
    n = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = (xc * inv).reshape(B, C, H, W)
    y = xhat
    if gamma is not None:
        y = xhat * gamma.value[None, :, None, None] + beta.value[None, :, None, None]

    def bw(out):
        g = out.grad
        if gamma is not None:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
            beta.accumulate(g.sum(axis=(0, 2, 3)))
            g = g * gamma.value[None, :, None, None]
        gh = g.reshape(B, groups, n)
        xh = xhat.reshape(B, groups, n)
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
        x.accumulate(gx.reshape(B, C, H, W))

    parents = (x,) if gamma is None else (x, gamma, beta)
    return Node(y, parents, bw)


def film(x: Node, mod: Node) -> Node:
    """x * (1 + scale) + shift with ``mod`` = [scale | shift] of shape (B, 2C)."""
    C = x.shape[1]
    s = mod.value[:, :C, None, None]
    t = mod.value[:, C:, None, None]

    def bw(out):
        g = out.grad
        x.accumulate(g * (1.0 + s))
        mod.accumulate(np.concatenate([(g * x.value).sum(axis=(2, 3)), g.sum(axis=(2, 3))], axis=1))

    return Node(x.value * (1.0 + s) + t, (x, mod), bw)
