"""Minimal reverse-mode automatic differentiation over numpy arrays.

Values are stored in the dtype they arrive in (float32 for model parameters,
float64 for verification runs); matrix products and reductions accumulate in
float64 before casting back, and every gradient is propagated in float64.
Graphs are built by composing the module-level ops and consumed once by
:func:`backward`.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

_GELU_C = float(np.sqrt(2.0 / np.pi))


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "grad")

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


def constant(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def _storage(*arrays) -> np.dtype:
    return np.result_type(*[a.dtype for a in arrays])


def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = (_f64(a.value) @ _f64(b.value)).astype(_storage(a.value, b.value))

    def backward_fn(g):
        return (g @ _f64(b.value).T, _f64(a.value).T @ g)

    return Node(out, (a, b), backward_fn)


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value + b.value

    def backward_fn(g):
        return (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape))

    return Node(out, (a, b), backward_fn)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value - b.value

    def backward_fn(g):
        return (_unbroadcast(g, a.value.shape), -_unbroadcast(g, b.value.shape))

    return Node(out, (a, b), backward_fn)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value * b.value

    def backward_fn(g):
        return (
            _unbroadcast(g * _f64(b.value), a.value.shape),
            _unbroadcast(g * _f64(a.value), b.value.shape),
        )

    return Node(out, (a, b), backward_fn)


def scale(a, s: float) -> Node:
    a = as_node(a)
    s = float(s)

    def backward_fn(g):
        return (g * s,)

    return Node(a.value * np.asarray(s, dtype=a.value.dtype), (a,), backward_fn)


def square(a) -> Node:
    a = as_node(a)

    def backward_fn(g):
        return (2.0 * g * _f64(a.value),)

    return Node(a.value * a.value, (a,), backward_fn)


def gelu(a) -> Node:
    """Smooth tanh-form GELU (finite-difference friendly everywhere)."""
    a = as_node(a)
    x = _f64(a.value)
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = (0.5 * x * (1.0 + t)).astype(a.value.dtype)

    def backward_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * d_inner),)

    return Node(out, (a,), backward_fn)


def softmax_rows(a) -> Node:
    a = as_node(a)
    x = _f64(a.value)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return Node(y.astype(a.value.dtype), (a,), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Node:
    """Row-wise normalization followed by elementwise affine."""
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    xv = _f64(x.value)
    d = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = (xhat * _f64(gain.value) + _f64(bias.value)).astype(
        _storage(x.value, gain.value, bias.value)
    )

    def backward_fn(g):
        dxhat = g * _f64(gain.value)
        dvar = np.sum(dxhat * (xv - mu), axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = -np.sum(dxhat, axis=-1, keepdims=True) * inv + dvar * np.mean(
            -2.0 * (xv - mu), axis=-1, keepdims=True
        )
        dx = dxhat * inv + dvar * 2.0 * (xv - mu) / d + dmu / d
        dgain = _unbroadcast(g * xhat, gain.value.shape)
        dbias = _unbroadcast(g, bias.value.shape)
        return (dx, dgain, dbias)

    return Node(out, (x, gain, bias), backward_fn)


def gather_rows(table, idx) -> Node:
    table = as_node(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.value[idx]

    def backward_fn(g):
        dt = np.zeros(table.value.shape, dtype=np.float64)
        np.add.at(dt, idx, g)
        return (dt,)

    return Node(out, (table,), backward_fn)


def concat_cols(nodes) -> Node:
    nodes = [as_node(n) for n in nodes]
    widths = [n.value.shape[-1] for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=-1)

    def backward_fn(g):
        grads, start = [], 0
        for w in widths:
            grads.append(g[..., start : start + w])
            start += w
        return tuple(grads)

    return Node(out, tuple(nodes), backward_fn)


def slice_cols(a, start: int, stop: int) -> Node:
    a = as_node(a)

    def backward_fn(g):
        da = np.zeros(a.value.shape, dtype=np.float64)
        da[..., start:stop] = g
        return (da,)

    return Node(a.value[..., start:stop], (a,), backward_fn)


def transpose(a) -> Node:
    a = as_node(a)

    def backward_fn(g):
        return (g.T,)

    return Node(a.value.T, (a,), backward_fn)


def repeat_rows(row, n: int) -> Node:
    """Broadcast a single (1, d) row to (n, d)."""
    row = as_node(row)

    def backward_fn(g):
        return (g.sum(axis=0, keepdims=True),)

    return Node(np.broadcast_to(row.value, (n, row.value.shape[-1])).copy(), (row,), backward_fn)


def normalize_rows(a, eps: float = 1e-12) -> Node:
    """Scale each row to unit Euclidean norm (norms below eps are floored)."""
    a = as_node(a)
    x = _f64(a.value)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    floored = norms < eps
    safe = np.where(floored, eps, norms)
    y = x / safe

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        dx = (g - np.where(floored, 0.0, 1.0) * y * dot) / safe
        return (dx,)

    return Node(y.astype(a.value.dtype), (a,), backward_fn)


def sum_all(a) -> Node:
    a = as_node(a)
    out = np.asarray(np.sum(_f64(a.value)), dtype=a.value.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g, a.value.shape).astype(np.float64),)

    return Node(out, (a,), backward_fn)


def mean_all(a) -> Node:
    a = as_node(a)
    size = a.value.size
    out = np.asarray(np.mean(_f64(a.value)), dtype=a.value.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g / size, a.value.shape).astype(np.float64),)

    return Node(out, (a,), backward_fn)


def mse(a, b) -> Node:
    """Mean of squared elementwise differences."""
    return mean_all(square(sub(a, b)))


def backward(root: Node) -> None:
    """Reverse sweep from a scalar root, accumulating float64 gradients."""
    if root.value.size != 1:
        raise NumericError("backward requires a scalar root")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root.grad = np.ones(root.value.shape, dtype=np.float64)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g
