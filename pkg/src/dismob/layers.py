"""Parameter containers, canonical differentiable blocks, and the
finite-difference gradient gate.

Parameters are float32 named tensors tagged ``shared`` or ``private:<city>``;
verification runs clone them to float64 so central differences resolve the
analytic gradients.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import InvalidInputError, NumericError


class Parameter:
    """Named tensor with a persistent gradient buffer and a partition tag."""

    __slots__ = ("name", "value", "grad", "tag", "trainable")

    def __init__(self, name: str, value: np.ndarray, tag: str = "shared",
                 trainable: bool = True):
        if tag != "shared" and not tag.startswith("private:"):
            raise InvalidInputError(f"parameter {name!r}: bad tag {tag!r}")
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.tag = tag
        self.trainable = trainable

    def copy(self) -> "Parameter":
        p = Parameter(self.name, self.value.copy(), self.tag, self.trainable)
        p.grad = self.grad.copy()
        return p

    def astype(self, dtype) -> "Parameter":
        p = Parameter(self.name, self.value.astype(dtype), self.tag, self.trainable)
        return p

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, tag={self.tag!r})"


def init_weight(shape: tuple[int, ...], rng: np.random.Generator,
                dtype=np.float32) -> np.ndarray:
    """Uniform(-limit, limit) with limit = sqrt(6 / (fan_in + fan_out))."""
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Leaves:
    """Per-forward workspace mapping each Parameter to a single leaf Node, so
    that repeated use inside one graph accumulates into one gradient."""

    def __init__(self):
        self._leaves: dict[int, tuple[Parameter, Node]] = {}

    def leaf(self, p: Parameter) -> Node:
        entry = self._leaves.get(id(p))
        if entry is None:
            entry = (p, Node(p.value))
            self._leaves[id(p)] = entry
        return entry[1]

    def accumulate_grads(self) -> None:
        """Add each leaf's gradient into its Parameter.grad (float32 storage)."""
        for p, node in self._leaves.values():
            if node.grad is None or not p.trainable:
                continue
            if not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient for parameter {p.name!r}")
            p.grad = p.grad + node.grad.astype(p.grad.dtype)

    def grad_of(self, p: Parameter) -> np.ndarray | None:
        entry = self._leaves.get(id(p))
        if entry is None or entry[1].grad is None:
            return None
        return entry[1].grad


def dense_forward(leaves: Leaves, x: Node, W: Parameter, b: Parameter) -> Node:
    """y = x W + b with recorded backward into W.grad and b.grad."""
    if x.value.shape[-1] != W.value.shape[0]:
        raise InvalidInputError(
            f"dense {W.name!r}: input width {x.value.shape[-1]} != {W.value.shape[0]}"
        )
    return ad.add(ad.matmul(x, leaves.leaf(W)), leaves.leaf(b))


def attention_forward(leaves: Leaves, X: Node, W_Q: Parameter, W_K: Parameter,
                      W_V: Parameter) -> Node:
    """Single-head self-attention: softmax(Q K^T / sqrt(d_k)) V with
    Q = X W_Q, K = X W_K, V = X W_V."""
    q = ad.matmul(X, leaves.leaf(W_Q))
    k = ad.matmul(X, leaves.leaf(W_K))
    v = ad.matmul(X, leaves.leaf(W_V))
    d_k = W_Q.value.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    return ad.matmul(ad.softmax_rows(scores), v)


def cross_attention_forward(leaves: Leaves, Q_src: Node, KV_src: Node,
                            W_Q: Parameter, W_K: Parameter, W_V: Parameter) -> Node:
    """Cross-attention with queries from Q_src and keys/values from KV_src."""
    if W_Q.value.shape[-1] != W_K.value.shape[-1]:
        raise InvalidInputError("query and key projections must share a width")
    q = ad.matmul(Q_src, leaves.leaf(W_Q))
    k = ad.matmul(KV_src, leaves.leaf(W_K))
    v = ad.matmul(KV_src, leaves.leaf(W_V))
    d_k = W_Q.value.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    return ad.matmul(ad.softmax_rows(scores), v)


def multihead_self_attention(leaves: Leaves, X: Node, heads: int,
                             W_Q: Parameter, W_K: Parameter, W_V: Parameter,
                             W_O: Parameter) -> Node:
    """Heads share concatenated projection matrices of width model_width."""
    width = W_Q.value.shape[-1]
    if width % heads != 0:
        raise InvalidInputError("projection width must divide by the head count")
    d_h = width // heads
    q = ad.matmul(X, leaves.leaf(W_Q))
    k = ad.matmul(X, leaves.leaf(W_K))
    v = ad.matmul(X, leaves.leaf(W_V))
    outs = []
    for h in range(heads):
        lo, hi = h * d_h, (h + 1) * d_h
        qh, kh, vh = (ad.slice_cols(m, lo, hi) for m in (q, k, v))
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(d_h))
        outs.append(ad.matmul(ad.softmax_rows(scores), vh))
    return ad.matmul(ad.concat_cols(outs), leaves.leaf(W_O))


def zero_grads(params) -> None:
    for p in params:
        p.grad = np.zeros_like(p.value)


def grad_check(fragment, params: list[Parameter], eps: float = 1e-3,
               max_coords: int = 200, seed: int = 0) -> float:
    """Compare analytic gradients of a scalar fragment against central finite
    differences; returns the maximum relative error over checked coordinates.

    The fragment is called as ``fragment(leaves)`` and must be deterministic.
    All coordinates are checked unless there are more than `max_coords`, in
    which case a seeded sample of `max_coords` coordinates is used.
    """
    if eps <= 0:
        raise InvalidInputError("eps must be > 0")
    leaves = Leaves()
    out = fragment(leaves)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("fragment produced a non-finite output")
    ad.backward(out)

    analytic = {}
    for p in params:
        g = leaves.grad_of(p)
        analytic[id(p)] = np.zeros(p.value.shape, dtype=np.float64) if g is None else g
        if not np.all(np.isfinite(analytic[id(p)])):
            raise NumericError(f"non-finite analytic gradient for {p.name!r}")

    coords = [(p, idx) for p in params for idx in range(p.value.size)]
    if len(coords) > max_coords:
        rng = np.random.Generator(np.random.Philox(key=seed))
        chosen = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(chosen.tolist())]

    max_rel = 0.0
    for p, idx in coords:
        flat = p.value.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = float(fragment(Leaves()).value)
        flat[idx] = orig - eps
        lo = float(fragment(Leaves()).value)
        flat[idx] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite perturbed output for {p.name!r}")
        fd = (hi - lo) / (2.0 * eps)
        an = float(analytic[id(p)].reshape(-1)[idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel
