"""Reverse-mode autodiff over dense float64 numpy arrays.

Each primitive builds the forward value eagerly and records a vector-Jacobian
closure; ``backward`` walks the implied graph in reverse topological order and
accumulates gradients into ``requires_grad`` leaves. Shapes are explicit:
the only broadcast allowed anywhere is the bias form of ``add``.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested primitive."""


class NumericError(RuntimeError):
    """A tensor left the finite-float domain (NaN or Inf)."""


_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph recording; ops return plain value tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array plus optional autodiff bookkeeping.

    ``requires_grad`` marks a leaf whose gradient is accumulated into
    ``.grad`` by ``backward``. Interior nodes carry ``parents`` and a
    ``vjp`` closure mapping the upstream gradient to per-parent gradients.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "vjp")

    def __init__(self, data, requires_grad=False, *, op="leaf", parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def in_graph(self) -> bool:
        """True when backward should propagate into or through this node."""
        return self.requires_grad or self.vjp is not None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def assert_finite(t: Tensor, context: str = "") -> Tensor:
    """Raise NumericError if the tensor holds any NaN or Inf entry."""
    if not np.all(np.isfinite(t.data)):
        where = f" in {context}" if context else ""
        raise NumericError(f"non-finite values{where} (op={t.op})")
    return t


def _node(data, op, parents, vjp) -> Tensor:
    if _grad_enabled and any(p.in_graph() for p in parents):
        return Tensor(data, op=op, parents=tuple(parents), vjp=vjp)
    return Tensor(data, op=op)


@dataclass
class Graph:
    """Primitive applications reachable from a loss, inputs before outputs."""

    nodes: list


def trace(root: Tensor) -> Graph:
    """Topologically order every in-graph node reachable from ``root``."""
    order = []
    seen = set()
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
            if p.in_graph() and id(p) not in seen:
                stack.append((p, False))
    return Graph(nodes=order)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    Each node is visited exactly once, in reverse topological order, so
    gradients from fan-out accumulate additively before propagating further.
    """
    if loss.shape != ():
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if graph is None:
        graph = trace(loss)
    upstream = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.in_graph():
                continue
            acc = upstream.get(id(parent))
            upstream[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, "matmul", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.shape}")
    return _node(a.data.T, "transpose", (a,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also the bias form (m, n) + (n,) or (m, n) + (1, n)."""
    if a.shape == b.shape:
        return _node(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        bias_shape = b.shape

        def vjp(g):
            return g, g.sum(axis=0).reshape(bias_shape)

        return _node(a.data + b.data.reshape(1, -1), "add", (a, b), vjp)
    raise ShapeError(f"add shapes {a.shape} and {b.shape} are incompatible")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: (g * c,))


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply shapes differ: {a.shape} vs {b.shape}")
    return _node(a.data * b.data, "multiply", (a, b), lambda g: (g * b.data, g * a.data))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(a.data.sum(), "sum_all", (a,), lambda g: (np.full(shape, g),))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndim = parts[0].ndim
    if axis >= ndim or any(p.ndim != ndim for p in parts):
        raise ShapeError("concat operands must share rank and a valid axis")
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[offsets[i] : offsets[i + 1]] if axis == 0 else g[:, offsets[i] : offsets[i + 1]]
            for i in range(len(parts))
        )

    return _node(out, "concat", tuple(parts), vjp)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D operand, got {a.shape}")
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), "slice_cols", (a,), vjp)


def softmax(x: Tensor, mask=None) -> Tensor:
    """Exp-normalize along the last axis, numerically stabilized.

    ``mask`` is a boolean array (same shape as ``x``, or 1-D applied to every
    row) where False entries are excluded: their output probability is
    exactly 0. Every row must keep at least one True entry.
    """
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape == data.shape:
            full_mask = mask
        elif mask.shape == (data.shape[-1],):
            full_mask = np.broadcast_to(mask, data.shape)
        else:
            raise ShapeError(f"mask shape {mask.shape} does not fit input {data.shape}")
        if not full_mask.any(axis=-1).all():
            raise ValueError("softmax row with all entries masked")
        shifted = np.where(full_mask, data, -np.inf)
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        exps = np.where(full_mask, np.exp(shifted), 0.0)
    else:
        shifted = data - data.max(axis=-1, keepdims=True)
        exps = np.exp(shifted)
    out = exps / exps.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _node(out, "softmax", (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.ndim else 0
    if x.ndim not in (1, 2) or d < 2:
        raise ShapeError(f"layer_norm needs a trailing axis of length >= 2, got {x.shape}")
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"gain/shift must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + shift.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axis0 = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=axis0), g.sum(axis=axis0)

    return _node(out, "layer_norm", (x, gain, shift), vjp)


def embedding_gather(table: Tensor, ids) -> Tensor:
    """Select rows ``ids`` of ``table``; backward scatter-adds into the table."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_gather table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError("embedding_gather ids must be a 1-D index list")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding_gather index out of range")
    shape = table.shape

    def vjp(g):
        dt = np.zeros(shape)
        np.add.at(dt, ids, g)
        return (dt,)

    return _node(table.data[ids], "embedding_gather", (table,), vjp)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``train`` is off or rate is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    return _node(x.data * factor, "dropout", (x,), lambda g: (g * factor,))
