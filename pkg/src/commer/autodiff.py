"""Reverse-mode automatic differentiation over a small, fixed operation set.

Graphs are built eagerly: every operation allocates a node that holds the
forward value plus a closure routing gradients to its parents. Node ids grow
in construction order, so walking reachable nodes in descending id order is a
valid topological order and makes gradient accumulation deterministic from
run to run.

float32 is the working precision for training. Every operation follows the
dtype of its inputs, so the same graph-building code runs unchanged in
float64 for gradient checking.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ContractViolation, NumericFault

_ids = itertools.count()

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A node in the computation graph: an ndarray plus backward plumbing."""

    __slots__ = ("id", "data", "requires_grad", "grad", "name", "op", "parents", "_backward", "aux")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.id = next(_ids)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = op
        self.parents = parents
        self._backward = None
        self.aux: np.ndarray | None = None  # op-specific payload (per-row NLLs)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        tag = self.name or self.op
        return f"Tensor(id={self.id}, {tag}, shape={self.shape}, rg={self.requires_grad})"


def param(data, name: str, dtype=np.float32) -> Tensor:
    """A named trainable leaf."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True, name=name)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _node(data: np.ndarray, parents: tuple, op: str, backward_fn) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, op=op, parents=parents)
    if rg:
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, ta: bool = False, tb: bool = False,
           scale: float | None = None) -> Tensor:
    """2-D matrix product with optional operand transposes and scalar factor."""
    A = a.data.T if ta else a.data
    B = b.data.T if tb else b.data
    out = A @ B
    if scale is not None:
        out = out * out.dtype.type(scale)

    def bwd(g):
        if scale is not None:
            g = g * g.dtype.type(scale)
        if a.requires_grad:
            dA = g @ B.T
            _accum(a, dA.T if ta else dA)
        if b.requires_grad:
            dB = A.T @ g
            _accum(b, dB.T if tb else dB)

    return _node(out, (a, b), "matmul", bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "multiply", bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bwd(g):
        _accum(a, g * c)

    return _node(a.data * c, (a,), "scale", bwd)


def softmax(x: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis, with an optional additive pre-mask."""
    z = x.data if additive_mask is None else x.data + additive_mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accum(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _node(s, (x,), "softmax", bwd)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain."""
    d = x.shape[-1]
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + x.data.dtype.type(eps))
    out = x.data * r * gain.data

    def bwd(g):
        if x.requires_grad:
            h = g * gain.data
            dot = (h * x.data).sum(axis=-1, keepdims=True)
            _accum(x, r * (h - x.data * (dot * r * r / d)))
        if gain.requires_grad:
            dg = (g * x.data * r).reshape(-1, d).sum(axis=0)
            _accum(gain, dg)

    return _node(out, (x, gain), "rms_norm", bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of an embedding table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"embedding id out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        _accum(table, buf)

    return _node(out, (table,), "embedding", bwd)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    if axis == 0:
        sl = (slice(start, stop),)
    elif axis == 1:
        sl = (slice(None), slice(start, stop))
    else:
        raise ContractViolation("slice_axis supports axis 0 or 1")
    out = x.data[sl].copy()

    def bwd(g):
        buf = np.zeros_like(x.data)
        buf[sl] = g
        _accum(x, buf)

    return _node(out, (x,), "slice", bwd)


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ContractViolation("concat of an empty list")
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]

    def bwd(g):
        off = 0
        for t, n in zip(xs, sizes):
            sl = (slice(off, off + n),) if axis == 0 else (slice(None), slice(off, off + n))
            _accum(t, g[sl])
            off += n

    return _node(out, tuple(xs), "concatenate", bwd)


def mean_axis(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over an axis (or the grand mean), accumulated in float64."""
    out = x.data.mean(axis=axis, dtype=np.float64).astype(x.dtype)
    n = x.size if axis is None else x.shape[axis]

    def bwd(g):
        if axis is None:
            _accum(x, np.full(x.shape, g / n, dtype=x.dtype))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g / n, axis), x.shape))

    return _node(out, (x,), "mean", bwd)


def sum_all(x: Tensor) -> Tensor:
    """Grand sum, composed as size * mean."""
    return scale(mean_axis(x), float(x.size))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    u = _GELU_C * (v + _GELU_A * v * v * v)
    t = np.tanh(u)
    out = 0.5 * v * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))

    return _node(out.astype(v.dtype), (x,), "gelu", bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; a no-op when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return mul(x, constant(keep, dtype=x.dtype))


def cross_entropy_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under row logits.

    The per-row NLL vector is kept on the node as `.aux` for metric reuse.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n = targets.shape[0]
    if n == 0 or logits.shape[0] != n:
        raise ContractViolation("cross_entropy_logits needs one target per logits row")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    zs = z - m
    lse = np.log(np.exp(zs).sum(axis=-1)) + m[:, 0]
    nll = lse - z[np.arange(n), targets]
    out = np.asarray(nll.mean(dtype=np.float64), dtype=z.dtype)

    def bwd(g):
        p = np.exp(zs)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), targets] -= 1.0
        _accum(logits, p * (g / n))

    node = _node(out, (logits,), "cross_entropy", bwd)
    node.aux = nll
    return node


# ---------------------------------------------------------------------------
# Backward sweep
# ---------------------------------------------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen:
            continue
        seen[t.id] = t
        stack.extend(t.parents)
    return list(seen.values())


def _raise_numeric_fault(nodes: list[Tensor]) -> None:
    for node in sorted(nodes, key=lambda t: t.id):
        if np.isnan(node.data).any():
            raise NumericFault(f"NaN produced by operation '{node.op}' (node id {node.id})")
    raise NumericFault("NaN detected but no originating node found")


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse sweep from a scalar root.

    Returns a map from leaf node id to gradient for every trainable leaf the
    loss depends on. Leaves with requires_grad=False are never touched.
    """
    if root.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    nodes = _reachable(root)
    if np.isnan(root.data).any():
        _raise_numeric_fault(nodes)
    root.grad = np.ones_like(root.data)
    for node in sorted(nodes, key=lambda t: -t.id):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return {t.id: t.grad for t in nodes
            if t.is_leaf and t.requires_grad and t.grad is not None}


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
