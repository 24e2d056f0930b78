"""Array-valued reverse-mode automatic differentiation.

A :class:`Value` wraps a float64 numpy array, remembers the operation that
produced it and knows how to push an upstream gradient back to its parents.
Only the handful of ops the encoder and the losses need are provided.
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_value(x):
    return x if isinstance(x, Value) else Value(x)


class Value:
    """n-d array node in a computation graph."""

    __array_priority__ = 1000  # make ndarray <op> Value dispatch to Value

    def __init__(self, data, _parents=(), _op="", requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._op = _op
        self._backward = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Value{tag}(shape={self.shape}, op={self._op or 'leaf'})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __float__(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Value(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g

    def _node(self, data, parents, op, backward):
        out = Value(data, parents, op)
        if out.requires_grad:
            out._backward = backward
        return out

    # elementwise arithmetic -------------------------------------------------

    def __add__(self, other):
        other = _as_value(other)

        def backward(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        return self._node(self.data + other.data, (self, other), "+", backward)

    __radd__ = __add__

    def __neg__(self):
        return self._node(-self.data, (self,), "neg", lambda g: self._accum(-g))

    def __sub__(self, other):
        return self + (-_as_value(other))

    def __rsub__(self, other):
        return _as_value(other) + (-self)

    def __mul__(self, other):
        other = _as_value(other)

        def backward(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        return self._node(self.data * other.data, (self, other), "*", backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_value(other)

        def backward(g):
            self._accum(_unbroadcast(g / other.data, self.shape))
            other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return self._node(self.data / other.data, (self, other), "/", backward)

    def __rtruediv__(self, other):
        return _as_value(other) / self

    def __pow__(self, k):
        if isinstance(k, Value):
            raise TypeError("only constant exponents are supported")

        def backward(g):
            self._accum(g * k * self.data ** (k - 1))

        return self._node(self.data**k, (self,), f"**{k}", backward)

    def __matmul__(self, other):
        other = _as_value(other)
        a, b = self.data, other.data

        def backward(g):
            if b.ndim == 1:
                ga = np.multiply.outer(g, b) if a.ndim > 1 else g * b
                gb = np.tensordot(a, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            else:
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.swapaxes(a, -1, -2) @ g
            self._accum(_unbroadcast(ga, a.shape))
            other._accum(_unbroadcast(gb, b.shape))

        return self._node(a @ b, (self, other), "@", backward)

    def __rmatmul__(self, other):
        return _as_value(other) @ self

    # unary functions -------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return self._node(out_data, (self,), "exp", lambda g: self._accum(g * out_data))

    def log(self):
        return self._node(np.log(self.data), (self,), "log", lambda g: self._accum(g / self.data))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return self._node(out_data, (self,), "sqrt", lambda g: self._accum(g * 0.5 / out_data))

    def tanh(self):
        out_data = np.tanh(self.data)
        return self._node(out_data, (self,), "tanh", lambda g: self._accum(g * (1.0 - out_data**2)))

    def relu(self):
        mask = self.data > 0
        return self._node(self.data * mask, (self,), "relu", lambda g: self._accum(g * mask))

    def clip(self, lo, hi):
        """Clamp to [lo, hi]; gradient is zero wherever the clamp is active."""
        inside = (self.data >= lo) & (self.data <= hi)
        return self._node(np.clip(self.data, lo, hi), (self,), "clip", lambda g: self._accum(g * inside))

    def softmax(self, axis=-1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            self._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        return self._node(s, (self,), "softmax", backward)

    # reductions and shape ops ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        in_shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, in_shape))

        return self._node(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        in_shape = self.shape
        return self._node(self.data.reshape(*shape), (self,), "reshape",
                          lambda g: self._accum(g.reshape(in_shape)))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return self._node(self.data.transpose(axes), (self,), "transpose",
                          lambda g: self._accum(g.transpose(inv)))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        def backward(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accum(full)

        return self._node(self.data[idx], (self,), "getitem", backward)

    # graph traversal -------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` of every reachable node from this scalar."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not np.isfinite(self.data).all():
            raise FloatingPointError(f"loss is not finite: {self.data}")
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        for node in order:
            if node is not self and node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Value) -> None:
    loss.backward()


def parameter(data, name=None) -> Value:
    return Value(data, requires_grad=True, name=name)


def bce_with_logits(logit, target):
    """Binary cross-entropy on a logit, in the overflow-free form.

    ``max(x, 0) - x*y + log(1 + exp(-|x|))``
    """
    logit = _as_value(logit)
    x = logit.data
    y = np.asarray(target, dtype=np.float64)
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        logit._accum(_unbroadcast(g * (sigmoid(x) - y), logit.shape))

    return logit._node(loss, (logit,), "bce", backward)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def where(cond, a, b):
    a, b = _as_value(a), _as_value(b)
    cond = np.asarray(cond, dtype=bool)

    def backward(g):
        a._accum(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        b._accum(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return a._node(np.where(cond, a.data, b.data), (a, b), "where", backward)


def concat(values, axis=0):
    values = [_as_value(v) for v in values]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for v, part in zip(values, np.split(g, splits, axis=axis)):
            v._accum(part)

    out = Value(np.concatenate([v.data for v in values], axis=axis), tuple(values), "concat")
    if out.requires_grad:
        out._backward = backward
    return out


def numerical_grad(f, x: np.ndarray, idx, h=1e-4):
    """Central difference of scalar ``f()`` with respect to ``x[idx]`` (in place)."""
    old = x[idx]
    x[idx] = old + h
    fp = float(f())
    x[idx] = old - h
    fm = float(f())
    x[idx] = old
    return (fp - fm) / (2 * h)
