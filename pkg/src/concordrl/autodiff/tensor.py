"""Reverse-mode autodiff over float64 numpy arrays.

A `Tensor` wraps a C-contiguous float64 array. Operations build a dynamic
tape (one `_Node` per op) whenever gradients can flow; `backward` walks the
tape once, accumulates gradients into the `.grad` buffers of requires_grad
leaves, then frees the tape. A second backward through the same tape is an
error by design: tapes are per-forward and disposable.

Gradient buffers exist exactly on requires_grad tensors, are zero at
creation, and accumulate across backward calls until an optimizer clears
them.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class AutodiffError(Exception):
    """Raised for tape misuse, shape mismatches, and non-finite values."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_ctx", "_spent")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._ctx: _Node | None = None
        self._spent = False

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def on_tape(self) -> bool:
        return self._ctx is not None

    def item(self) -> float:
        if self.values.size != 1:
            raise AutodiffError(f"item() needs a single element, shape is {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad or p._ctx is not None for p in parents):
        out._ctx = _Node(tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze_axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] > 1)
    if squeeze_axes:
        grad = grad.sum(axis=squeeze_axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values + b.values

    def back(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(out, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.values * b.values
    av, bv = a.values, b.values

    def back(g):
        return (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape))

    return _make(out, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise AutodiffError(
            f"matmul needs operands with ndim >= 2, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise AutodiffError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values

    def back(g):
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(av.swapaxes(-1, -2) @ g, b.shape)
        return (ga, gb)

    return _make(out, (a, b), back)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.values.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= in_shape[ax]

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape) / count,)

    return _make(out, (a,), back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,))


def safe_log(a, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is 1/x above the floor, 0 below it."""
    a = _as_tensor(a)
    clipped = np.maximum(a.values, floor)
    out = np.log(clipped)
    mask = a.values >= floor

    def back(g):
        return (np.where(mask, g / clipped, 0.0),)

    return _make(out, (a,), back)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.values, 0.0)
    mask = a.values > 0.0
    return _make(out, (a,), lambda g: (g * mask,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.values * a.values, (a,), lambda g: (2.0 * g * a.values,))


def softmax(a, temperature: float = 1.0) -> Tensor:
    """Temperature softmax along the last axis.

    Rows of the output are probability vectors; adding a constant to all
    logits in a row leaves the row unchanged.
    """
    a = _as_tensor(a)
    if temperature <= 0.0:
        raise AutodiffError(f"softmax temperature must be positive, got {temperature}")
    if not np.isfinite(a.values).all():
        raise AutodiffError("softmax input contains non-finite values")
    z = a.values / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner) / temperature,)

    return _make(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    in_shape = a.shape
    out = a.values.reshape(shape)

    def back(g):
        return (g.reshape(in_shape),)

    return _make(out, (a,), back)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.values, axes)
    inverse = np.argsort(axes)

    def back(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise AutodiffError("concat of zero tensors")
    out = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), back)


def gather_rows(table, indices) -> Tensor:
    """Select rows of a 2-D table by integer index; gradient scatter-adds."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2:
        raise AutodiffError(f"gather_rows expects a 2-D table, got shape {table.shape}")
    if idx.ndim != 1:
        raise AutodiffError(f"gather_rows expects 1-D indices, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise AutodiffError(
            f"gather_rows index out of range [0, {table.shape[0]}): {idx.tolist()}"
        )
    out = table.values[idx]
    n_rows = table.shape[0]

    def back(g):
        acc = np.zeros((n_rows, table.shape[1]))
        np.add.at(acc, idx, g)
        return (acc,)

    return _make(out, (table,), back)


def take_per_row(a, indices) -> Tensor:
    """a[i, indices[i]] for each row i of a 2-D tensor."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise AutodiffError(
            f"take_per_row needs a [B, C] tensor and B indices, got {a.shape} / {idx.shape}"
        )
    rows = np.arange(a.shape[0])
    out = a.values[rows, idx]
    in_shape = a.shape

    def back(g):
        acc = np.zeros(in_shape)
        acc[rows, idx] = g
        return (acc,)

    return _make(out, (a,), back)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad leaf reachable from `loss`.

    The tape is freed afterwards; calling backward on the same loss twice
    raises. Gradients accumulate into existing buffers.
    """
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if loss.values.ndim != 0:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise AutodiffError("backward already ran for this tape; build a fresh forward pass")
    loss._spent = True
    if loss._ctx is None:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if not np.isfinite(g).all():
                raise AutodiffError("non-finite gradient reached a parameter")
            node.grad += g
        ctx = node._ctx
        if ctx is None:
            continue
        parent_grads = ctx.backward_fn(g)
        for parent, pg in zip(ctx.parents, parent_grads):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._ctx = None  # free the tape as we go
