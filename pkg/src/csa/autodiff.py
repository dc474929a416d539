"""Reverse-mode automatic differentiation over numpy float64 arrays.

A ``Tensor`` wraps an array and, while recording is enabled, remembers the
operations that produced it together with vector-Jacobian closures. Calling
``backward()`` on a scalar replays the recording in reverse topological order
and accumulates exact partials into ``.grad`` of every reachable tensor that
``requires_grad``. The op set is deliberately small: it covers affine layers,
batch normalization, planar flows, the survival losses, and log-domain
Sinkhorn iterations.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _special

_GRAD_ENABLED = True

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class no_grad:
    """Context manager that suspends graph recording (pure evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the differentiation graph; data is always float64."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    # make numpy defer mixed expressions to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data, parents) -> "Tensor":
        if _GRAD_ENABLED:
            live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
            if live:
                return Tensor(data, requires_grad=True, _parents=live)
        return Tensor(data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._parents:
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    parent.grad += contrib

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = lift(other)
        out_data = self.data + other.data
        return Tensor._result(out_data, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, ((self, lambda g: -g),))

    def __sub__(self, other):
        other = lift(other)
        return Tensor._result(self.data - other.data, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(-g, other.data.shape)),
        ))

    def __rsub__(self, other):
        return lift(other) - self

    def __mul__(self, other):
        other = lift(other)
        return Tensor._result(self.data * other.data, (
            (self, lambda g: _unbroadcast(g * other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(g * self.data, other.data.shape)),
        ))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = lift(other)
        return Tensor._result(self.data / other.data, (
            (self, lambda g: _unbroadcast(g / other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(-g * self.data / (other.data * other.data),
                                           other.data.shape)),
        ))

    def __rtruediv__(self, other):
        return lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** exponent
        return Tensor._result(out_data, (
            (self, lambda g: g * exponent * self.data ** (exponent - 1)),
        ))

    def __matmul__(self, other):
        other = lift(other)
        return Tensor._result(self.data @ other.data, (
            (self, lambda g: g @ other.data.T),
            (other, lambda g: self.data.T @ g),
        ))

    # -- shape ops -----------------------------------------------------------

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def vjp(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            return full

        return Tensor._result(out_data, ((self, vjp),))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.data.shape
        return Tensor._result(self.data.reshape(shape),
                              ((self, lambda g: g.reshape(old)),))

    def transpose(self):
        return Tensor._result(self.data.T, ((self, lambda g: g.T),))

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 else np.full(shape, g)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, shape).copy()

        return Tensor._result(out_data, ((self, vjp),))

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._result(out_data, ((self, lambda g: g * out_data),))

    def log(self):
        return Tensor._result(np.log(self.data),
                              ((self, lambda g: g / self.data),))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._result(out_data, ((self, lambda g: g / (2.0 * out_data)),))

    def tanh(self):
        out_data = np.tanh(self.data)
        return Tensor._result(out_data, ((self, lambda g: g * (1.0 - out_data * out_data)),))

    def sigmoid(self):
        out_data = _special.expit(self.data)
        return Tensor._result(out_data, ((self, lambda g: g * out_data * (1.0 - out_data)),))

    def softplus(self):
        out_data = np.logaddexp(0.0, self.data)
        return Tensor._result(out_data, ((self, lambda g: g * _special.expit(self.data)),))

    def abs(self):
        return Tensor._result(np.abs(self.data),
                              ((self, lambda g: g * np.sign(self.data)),))

    __abs__ = abs

    def relu(self):
        """max(0, x); the subgradient at 0 is taken as 0."""
        mask = self.data > 0.0
        return Tensor._result(np.where(mask, self.data, 0.0),
                              ((self, lambda g: g * mask),))

    def leaky_relu(self, negative_slope: float = 0.01):
        mask = self.data > 0.0
        scale = np.where(mask, 1.0, negative_slope)
        return Tensor._result(self.data * scale, ((self, lambda g: g * scale),))


def lift(value) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
        index = [slice(None)] * out_data.ndim
        index[axis] = slice(int(lo), int(hi))
        index = tuple(index)
        parents.append((t, lambda g, index=index: g[index]))
    return Tensor._result(out_data, tuple(parents))


def logsumexp(t: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """log(sum(exp(t))) along ``axis``; the stabilizing shift is constant."""
    shift = np.max(t.data, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    out = (t - shift).exp().sum(axis=axis, keepdims=True).log() + shift
    if keepdims:
        return out
    return out.reshape(np.squeeze(out.data, axis=axis).shape)


def log_ndtr(t: Tensor) -> Tensor:
    """log of the standard normal CDF, stable far into the lower tail."""
    x = t.data
    out_data = _special.log_ndtr(x)
    # d/dx log Phi(x) = phi(x) / Phi(x), evaluated in log space
    ratio = np.exp(-0.5 * x * x - _HALF_LOG_2PI - out_data)
    return Tensor._result(out_data, ((t, lambda g: g * ratio),))


def collect_grad(params, like=None) -> np.ndarray:
    """Concatenate ``.grad`` of a parameter list into one flat vector."""
    parts = []
    for p in params:
        if p.grad is None:
            parts.append(np.zeros(p.data.size))
        else:
            parts.append(np.asarray(p.grad, dtype=np.float64).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def finite_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (independent oracle)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        grad.flat[i] = (f(xp) - f(xm)) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative disagreement between two gradient vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
