"""Dense float64 tensors with reverse-mode gradients.

The graph built while computing a scalar loss acts as the gradient tape:
each operation records its parents and a vector-Jacobian closure, and
``backward`` replays the recorded operations in reverse topological order.
Rebuilding the same graph from identical inputs reproduces gradients
bit-for-bit, which the tests rely on.

Everything is float64 and every operation validates that its result is
finite, so divergence during training surfaces as :class:`NumericError`
instead of silent NaNs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, EvaluationError, NumericError, ShapeError

Array = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A numpy float64 array plus the bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"cannot convert shape {self.shape} to float")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all delegate to the module-level ops
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: Array, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _from_op(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _from_op(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product; batched over leading axes when operands are 3-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _from_op(out, (a, b), vjp)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    out = np.swapaxes(a.data, -1, -2)
    return _from_op(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _from_op(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _from_op(out, ts, vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _from_op(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _from_op(out, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return _from_op(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        # subgradient 0 at zero keeps zero-norm corner cases finite
        denom = np.where(out == 0.0, 1.0, 2.0 * out)
        return (np.where(out == 0.0, 0.0, g / denom),)

    return _from_op(out, (a,), vjp)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return _from_op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: Array) -> Array:
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _from_op(out, (a,), lambda g: (g * _sigmoid(a.data),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * local,)

    return _from_op(out, (a,), vjp)


def maximum0(a) -> Tensor:
    """max(x, 0) with subgradient 0 at the kink."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _from_op(out, (a,), lambda g: (g * mask,))


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    out_kd = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = out_kd if keepdims else np.squeeze(out_kd, axis=axis)
    soft = np.exp(a.data - out_kd)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _from_op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# the composite operations everything else is built from


def softmax(v, tau=1.0, axis: int = -1) -> Tensor:
    """Temperature softmax, stabilized by max subtraction (inside logsumexp).

    ``tau`` may be a float or a scalar Tensor (for learnable temperatures);
    it must be positive either way.
    """
    if float(tau if not isinstance(tau, Tensor) else tau.data) <= 0.0:
        raise DomainError("softmax temperature must be positive")
    z = div(as_tensor(v), tau)
    return exp(sub(z, logsumexp(z, axis=axis, keepdims=True)))


def l2_normalize(x, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """x / (||x||_2 + eps) along ``axis``; maps the zero vector to zero."""
    x = as_tensor(x)
    norm = sqrt(sum_(mul(x, x), axis=axis, keepdims=True))
    return div(x, add(norm, eps))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor."""
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[Array]:
    """Run backward and return gradients aligned with ``params``."""
    backward(loss)
    return [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]


def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float) -> Array:
    """Central-difference gradient estimate of a scalar function."""
    if h <= 0.0:
        raise DomainError("finite difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_x.size):
        bumped = flat_x.copy()
        bumped[i] = flat_x[i] + h
        f_plus = float(f(bumped.reshape(x.shape)))
        bumped[i] = flat_x[i] - h
        f_minus = float(f(bumped.reshape(x.shape)))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise EvaluationError(f"function not finite near coordinate {i}")
        flat_out[i] = (f_plus - f_minus) / (2.0 * h)
    return out
