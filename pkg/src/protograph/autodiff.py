"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Minimal tape in the micrograd style: every op returns a Tensor that
remembers its input Tensors and a closure routing the output adjoint back
to them. ``backward`` topologically sorts the graph from a scalar loss,
seeds the adjoint with 1, runs the closures in reverse and finally drops
the graph references so buffers are freed.

Every forward op checks that its result is finite; NaN/Inf raise
immediately instead of propagating through the graph.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, _op)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = None
        self._prev: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Wrap an array or scalar as a constant Tensor; Tensors pass through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _make(data, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg, _op=op)
    if rg:
        out._prev = tuple(inputs)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original input shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), backward, "matmul")


def spmm(a_sparse: sp.spmatrix, x) -> Tensor:
    """Sparse (constant) times dense (differentiable) matrix product."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("spmm expects a 2-D dense operand")
    a_csr = a_sparse.tocsr()
    out_data = a_csr @ x.data

    def backward(g):
        _accumulate(x, a_csr.T @ g)

    return _make(out_data, (x,), backward, "spmm")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")

    def backward(g):
        _accumulate(x, g.T)

    return _make(x.data.T.copy(), (x,), backward, "transpose")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        _accumulate(x, g * mask)

    return _make(out_data, (x,), backward, "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)
    _check_finite(out_data, "exp")

    def backward(g):
        _accumulate(x, g * out_data)

    return _make(out_data, (x,), backward, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(x.data)
    _check_finite(out_data, "log")

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(out_data, (x,), backward, "log")


def absolute(x) -> Tensor:
    """Elementwise |x|; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    out_data = np.abs(x.data)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _make(out_data, (x,), backward, "absolute")


def tensor_sum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
        else:
            _accumulate(x, np.expand_dims(g, axis) * np.ones_like(x.data))

    return _make(out_data, (x,), backward, "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out_data = x.data.mean()

    def backward(g):
        _accumulate(x, np.full(x.data.shape, g / n))

    return _make(out_data, (x,), backward, "mean")


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out_data = x.data[idx]

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accumulate(x, gx)

    return _make(out_data, (x,), backward, "gather_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(out_data, ts, backward, "concat")


def row_softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        _accumulate(x, s * (g - dot))

    return _make(s, (x,), backward, "row_softmax")


def row_logsumexp(x) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=1, keepdims=True)
    z = np.exp(x.data - m)
    lse = (m + np.log(z.sum(axis=1, keepdims=True))).ravel()
    soft = z / z.sum(axis=1, keepdims=True)

    def backward(g):
        _accumulate(x, g[:, None] * soft)

    return _make(lse, (x,), backward, "row_logsumexp")


def masked_row_logsumexp(x, mask) -> Tensor:
    """Row-wise logsumexp restricted to entries where mask is True.

    Every row must keep at least one active entry. Masked-out logits do not
    contribute to the value or the gradient.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ValueError("mask shape must match logits shape")
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one unmasked entry")
    neg_inf = np.where(mask, x.data, -np.inf)
    m = neg_inf.max(axis=1, keepdims=True)
    z = np.where(mask, np.exp(x.data - m), 0.0)
    total = z.sum(axis=1, keepdims=True)
    lse = (m + np.log(total)).ravel()
    soft = z / total

    def backward(g):
        _accumulate(x, g[:, None] * soft)

    return _make(lse, (x,), backward, "masked_row_logsumexp")


def l2_normalize_rows(x) -> Tensor:
    """Row-wise L2 normalization; all-zero rows pass through unchanged.

    On the zero set the op acts as the identity, so the adjoint is passed
    through untouched there.
    """
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    nonzero = norms.ravel() > 0
    safe = np.where(norms > 0, norms, 1.0)
    out_data = x.data / safe

    def backward(g):
        gx = g / safe - out_data * ((g * out_data).sum(axis=1, keepdims=True) / safe)
        gx[~nonzero] = g[~nonzero]
        _accumulate(x, gx)

    return _make(out_data, (x,), backward, "l2_normalize_rows")


def row_l2norm(x) -> Tensor:
    """Per-row Euclidean norm; the subgradient at zero rows is 0."""
    x = as_tensor(x)
    norms = np.linalg.norm(x.data, axis=1)

    def backward(g):
        safe = np.where(norms > 0, norms, 1.0)
        _accumulate(x, (g / safe)[:, None] * x.data * (norms > 0)[:, None])

    return _make(norms, (x,), backward, "row_l2norm")


def row_sqdist(a, b) -> Tensor:
    """Per-row squared L2 distance between two equal-shape matrices."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError("row_sqdist expects equal shapes")
    diff = a.data - b.data
    out_data = (diff * diff).sum(axis=1)

    def backward(g):
        scaled = 2.0 * g[:, None] * diff
        _accumulate(a, scaled)
        _accumulate(b, -scaled)

    return _make(out_data, (a, b), backward, "row_sqdist")


def backward(loss: Tensor) -> None:
    """Populate gradients of everything the scalar loss depends on.

    The graph is released afterwards, so a second backward through the same
    nodes is impossible without recomputing the forward pass.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                stack.append((child, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in topo:
        node._backward = None
        node._prev = ()
