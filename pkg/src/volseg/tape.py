"""Reverse-mode automatic differentiation on numpy arrays.

This is deliberately minimal: it records exactly the operations the volume
losses need (dense linear algebra, sinusoids, the usual smooth activations,
reductions, and an exclusive cumulative sum for transmittance) and nothing
else.  Every op stores a vector-Jacobian closure; ``Tensor.backward`` walks
the recorded graph once in reverse topological order.

Gradients are exact (analytic) — the test suite checks each op and every
composed loss against central finite differences.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit as _expit

_GRAD_ENABLED = True


class GraphError(RuntimeError):
    """backward() was called on a tensor with no recorded computation."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    # sum away prepended axes
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    # sum over axes that were size 1
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    # Make numpy defer `ndarray <op> Tensor` to our reflected operators
    # instead of broadcasting over the Tensor as an opaque object.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()  # tuple of (parent Tensor, vjp callable)

    # -- construction of derived nodes ------------------------------------

    @staticmethod
    def _make(data, parents):
        out = Tensor(data)
        if _GRAD_ENABLED:
            parents = tuple((p, fn) for p, fn in parents if p.requires_grad)
            if parents:
                out.requires_grad = True
                out._parents = parents
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- autodiff ----------------------------------------------------------

    def backward(self, seed=None):
        """Accumulate gradients of ``self`` into every reachable ``.grad``."""
        if not self.requires_grad:
            raise GraphError(
                "backward() on a tensor with no recorded graph "
                "(requires_grad is False or built under no_grad())"
            )
        if seed is None:
            if self.data.size != 1:
                raise GraphError("implicit backward seed requires a scalar loss")
            seed = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, vjp in node._parents:
                g = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = g.astype(parent.data.dtype, copy=True)
                else:
                    parent.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def item(self):
        return float(self.data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor._make(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ],
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor._make(
        out,
        [
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(-g, b.data.shape)),
        ],
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor._make(
        out,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor._make(
        out,
        [
            (a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        ],
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    out = a.data @ b.data
    return Tensor._make(
        out,
        [
            (a, lambda g: g @ b.data.T),
            (b, lambda g: a.data.T @ g),
        ],
    )


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return Tensor._make(out, [(a, vjp)])


def reshape(a, *shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return Tensor._make(out, [(a, lambda g: g.reshape(a.data.shape))])


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    parents = []
    start = 0
    ax = axis if axis >= 0 else out.ndim + axis
    for t in tensors:
        n = t.data.shape[ax]
        sl = tuple(
            slice(start, start + n) if i == ax else slice(None) for i in range(out.ndim)
        )
        parents.append((t, lambda g, sl=sl: g[sl]))
        start += n
    return Tensor._make(out, parents)


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    parents = []
    for i, t in enumerate(tensors):
        parents.append((t, lambda g, i=i: np.take(g, i, axis=ax)))
    return Tensor._make(out, parents)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.data.shape).copy()

    return Tensor._make(out, [(a, vjp)])


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _unary(a, out, dfn):
    a = as_tensor(a)
    return Tensor._make(out, [(a, lambda g: g * dfn())])


def sin(a):
    a = as_tensor(a)
    return _unary(a, np.sin(a.data), lambda: np.cos(a.data))


def cos(a):
    a = as_tensor(a)
    return _unary(a, np.cos(a.data), lambda: -np.sin(a.data))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda: out)


def expm1(a):
    a = as_tensor(a)
    out = np.expm1(a.data)
    return _unary(a, out, lambda: out + 1.0)


def log(a):
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _unary(a, out, lambda: 0.5 / out)


def square(a):
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda: 2.0 * a.data)


def tabs(a):
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, lambda: 1.0 - out * out)


def sigmoid(a):
    a = as_tensor(a)
    out = _expit(a.data)
    return _unary(a, out, lambda: out * (1.0 - out))


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _unary(a, out, lambda: _expit(a.data))


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _unary(a, out, lambda: (a.data > 0.0).astype(a.data.dtype))


def clip(a, lo, hi):
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return _unary(a, out, lambda: mask.astype(a.data.dtype))


def where(cond, a, b):
    """Select with a *constant* boolean condition array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return Tensor._make(
        out,
        [
            (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), a.data.shape)),
            (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), b.data.shape)),
        ],
    )


def exclusive_cumsum(a, axis=-1):
    """out[..., k] = sum of a[..., :k] along the last axis (axis=-1 only)."""
    if axis != -1:
        raise ValueError("exclusive_cumsum supports axis=-1 only")
    a = as_tensor(a)
    cs = np.cumsum(a.data, axis=-1)
    out = np.empty_like(cs)
    out[..., 0] = 0.0
    out[..., 1:] = cs[..., :-1]

    def vjp(g):
        rs = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
        return rs - g

    return Tensor._make(out, [(a, vjp)])
