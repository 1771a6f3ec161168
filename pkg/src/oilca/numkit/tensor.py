"""Dense 2-D reverse-mode autodiff.

Every value is a float64 matrix. Ops record their parents and a closure that
pushes the output gradient back to them; ``backward`` walks the recorded
graph in reverse topological order.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError, NumericError


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph holding a 2-D float64 value."""

    __slots__ = ("value", "grad", "parents", "op", "_backward", "requires_grad", "name")

    def __init__(self, value, parents=(), op="leaf", requires_grad=False, name=None, _check=True):
        value = value if (not _check and isinstance(value, np.ndarray)) else _as_matrix(value)
        if not np.isfinite(value).all():
            raise NumericError(f"non-finite entries in output of op '{op}'")
        self.value = value
        self.grad = None
        self.parents = parents
        self.op = op
        self._backward = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.value, op="detach", _check=False)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
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

    def __getitem__(self, cols):
        if not isinstance(cols, tuple) or len(cols) != 2 or cols[0] != slice(None):
            raise ContractError("only column slicing t[:, i:j] is supported")
        return take_cols(self, cols[1])


def parameter(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, op="const")


def _node(value, parents, op, backward) -> Tensor:
    out = Tensor(value, parents=parents, op=op, _check=False)
    out._backward = backward
    return out


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.value + b.value
    return _node(out, (a, b), "add", lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.value - b.value
    return _node(out, (a, b), "sub", lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _node(av @ bv, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def tanh(a) -> Tensor:
    y = np.tanh(a.value)
    return _node(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def softplus(a) -> Tensor:
    x = a.value
    y = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(y, (a,), "softplus", lambda g: (g * sig,))


def sigmoid(a) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    y = np.exp(a.value)
    return _node(y, (a,), "exp", lambda g: (g * y,))


def log(a) -> Tensor:
    x = a.value
    if (x <= 0).any():
        raise NumericError("log of a non-positive value")
    return _node(np.log(x), (a,), "log", lambda g: (g / x,))


def square(a) -> Tensor:
    x = a.value
    return _node(x * x, (a,), "square", lambda g: (2.0 * g * x,))


def clamp(a, lo, hi) -> Tensor:
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return _node(np.clip(x, lo, hi), (a,), "clamp", lambda g: (g * inside,))


def total(a) -> Tensor:
    shape = a.shape
    return _node(np.array([[a.value.sum()]]), (a,), "sum", lambda g: (np.full(shape, g[0, 0]),))


def mean(a) -> Tensor:
    shape = a.shape
    n = a.value.size
    return _node(np.array([[a.value.mean()]]), (a,), "mean", lambda g: (np.full(shape, g[0, 0] / n),))


def row_sum(a) -> Tensor:
    shape = a.shape
    return _node(a.value.sum(axis=1, keepdims=True), (a,), "row_sum",
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def take_cols(a, cols: slice) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, cols] = g
        return (full,)

    return _node(a.value[:, cols].copy(), (a,), "take_cols", back)


def concat_cols(parts) -> Tensor:
    parts = [constant(p) for p in parts]
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row mismatch: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), "concat", back)


def _topological(root: Tensor):
    order, seen = [], set()
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable parameter."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    grads = {id(loss): np.ones((1, 1))}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if parent._backward is None and not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
