"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, dtype-preserving so checks
can run in float64).  Each op records its parents and a backward closure;
``backward()`` walks the graph in reverse topological order and accumulates
gradients.  Reductions accumulate in float64 before casting back.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus optional gradient and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        # Stores a reference on first accumulation and never mutates grads in
        # place afterwards, so backward closures may share arrays freely.
        if self.grad is None:
            self.grad = grad
        else:
            self.grad = self.grad + grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep seeding this tensor's gradient (1 for scalars)."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed requires a scalar tensor")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.accumulate_grad(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Convenience operators used throughout the model code.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), _const(-1.0, self.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _const(value: float, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def parameter(data: ArrayLike, dtype=np.float32) -> Tensor:
    """A trainable tensor (requires_grad on)."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


# --- arithmetic ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            a.accumulate_grad(_unbroadcast(grad, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate_grad(_unbroadcast(grad, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            a.accumulate_grad(_unbroadcast(grad * b.data, a.shape))
        if b.requires_grad or b._parents:
            b.accumulate_grad(_unbroadcast(grad * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=1D @ >=2D operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(grad):
        if a.requires_grad or a._parents:
            ga = grad @ np.swapaxes(b.data, -1, -2) if a.data.ndim > 1 else grad @ b.data.T
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad or b._parents:
            if a.data.ndim > 1:
                gb = np.swapaxes(a.data, -1, -2) @ grad
            else:
                gb = np.outer(a.data, grad)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return _make(data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(grad):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(grad[tuple(idx)])

    return _make(data, tuple(tensors), backward)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (gradient scatters back)."""
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = t.data[idx]

    def backward(grad):
        if t.requires_grad or t._parents:
            full = np.zeros_like(t.data)
            full[idx] = grad
            t.accumulate_grad(full)

    return _make(data, (t,), backward)


def reshape(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = t.data.reshape(shape)

    def backward(grad):
        if t.requires_grad or t._parents:
            t.accumulate_grad(grad.reshape(t.shape))

    return _make(data, (t,), backward)


def swap_axes(t: Tensor, a: int, b: int) -> Tensor:
    data = np.swapaxes(t.data, a, b)

    def backward(grad):
        if t.requires_grad or t._parents:
            t.accumulate_grad(np.swapaxes(grad, a, b))

    return _make(data, (t,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def backward(grad):
        if table.requires_grad or table._parents:
            full = np.zeros_like(table.data)
            flat_ids = ids.reshape(-1)
            flat_grad = grad.reshape(-1, table.shape[1])
            if table.shape[0] <= 128:  # np.add.at is slow; tiny tables sum per row
                for row in np.unique(flat_ids):
                    full[row] = flat_grad[flat_ids == row].sum(axis=0)
            else:
                np.add.at(full, flat_ids, flat_grad)
            table.accumulate_grad(full)

    return _make(data, (table,), backward)


# --- nonlinearities ------------------------------------------------------


def sigmoid(t: Tensor) -> Tensor:
    data = 1.0 / (1.0 + np.exp(-t.data))

    def backward(grad):
        if t.requires_grad or t._parents:
            t.accumulate_grad(grad * data * (1.0 - data))

    return _make(data, (t,), backward)


def tanh(t: Tensor) -> Tensor:
    data = np.tanh(t.data)

    def backward(grad):
        if t.requires_grad or t._parents:
            t.accumulate_grad(grad * (1.0 - data * data))

    return _make(data, (t,), backward)


def relu(t: Tensor) -> Tensor:
    data = np.maximum(t.data, 0.0)

    def backward(grad):
        if t.requires_grad or t._parents:
            t.accumulate_grad(grad * (t.data > 0.0))

    return _make(data, (t,), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = (e / e.sum(axis=axis, keepdims=True, dtype=np.float64)).astype(t.dtype)

    def backward(grad):
        if t.requires_grad or t._parents:
            inner = (grad * data).sum(axis=axis, keepdims=True, dtype=np.float64).astype(t.dtype)
            t.accumulate_grad(data * (grad - inner))

    return _make(data, (t,), backward)


def dropout(t: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: scales retained units by 1/(1-p); identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return t
    if rng is None:
        raise ShapeError("training-mode dropout requires an rng")
    mask = (rng.random(t.shape) >= p).astype(t.dtype) / (1.0 - p)
    data = t.data * mask

    def backward(grad):
        if t.requires_grad or t._parents:
            t.accumulate_grad(grad * mask)

    return _make(data, (t,), backward)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mean = t.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    centered = t.data - mean.astype(t.dtype)
    var = np.mean(centered * centered, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(t.dtype)
    norm = centered * inv
    data = norm * gain.data + bias.data
    n = t.shape[-1]

    def backward(grad):
        if gain.requires_grad or gain._parents:
            gain.accumulate_grad(_unbroadcast(grad * norm, gain.shape))
        if bias.requires_grad or bias._parents:
            bias.accumulate_grad(_unbroadcast(grad, bias.shape))
        if t.requires_grad or t._parents:
            gnorm = grad * gain.data
            s1 = gnorm.sum(axis=-1, keepdims=True, dtype=np.float64).astype(t.dtype)
            s2 = (gnorm * norm).sum(axis=-1, keepdims=True, dtype=np.float64).astype(t.dtype)
            t.accumulate_grad(inv * (gnorm - s1 / n - norm * s2 / n))

    return _make(data, (t, gain, bias), backward)


def sum_all(t: Tensor) -> Tensor:
    data = np.asarray(t.data.sum(dtype=np.float64), dtype=t.dtype)

    def backward(grad):
        if t.requires_grad or t._parents:
            t.accumulate_grad(np.broadcast_to(grad, t.shape).astype(t.dtype))

    return _make(data, (t,), backward)


def mean_axis(t: Tensor, axis: int) -> Tensor:
    data = t.data.mean(axis=axis, dtype=np.float64).astype(t.dtype)
    n = t.shape[axis]

    def backward(grad):
        if t.requires_grad or t._parents:
            g = np.expand_dims(grad, axis) / n
            t.accumulate_grad(np.broadcast_to(g, t.shape).astype(t.dtype))

    return _make(data, (t,), backward)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean token-level cross entropy over all unmasked positions.

    ``logits`` has shape (..., C); ``targets`` the matching integer shape.
    ``mask`` (same shape as ``targets``) marks positions that count; the
    loss is the sum over counted positions divided by their number.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} != logits batch shape {logits.shape[:-1]}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=logits.dtype)
    else:
        mask = np.asarray(mask, dtype=logits.dtype)
    count = float(mask.sum(dtype=np.float64))
    if count <= 0:
        raise ShapeError("cross_entropy with an all-zero mask")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, dtype=np.float64)).astype(logits.dtype)
    picked = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    losses = logsumexp - picked
    data = np.asarray((losses * mask).sum(dtype=np.float64) / count, dtype=logits.dtype)

    def backward(grad):
        if logits.requires_grad or logits._parents:
            probs = np.exp(shifted - logsumexp[..., None])
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
            g = (probs - onehot) * (mask[..., None] / count) * grad
            logits.accumulate_grad(g.astype(logits.dtype))

    return _make(data, (logits,), backward)


def zeros(shape: tuple[int, ...], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))
