"""Small reverse-mode autodiff over float64 numpy arrays, plus Adam.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure pushing the upstream gradient back to them.  ``backward`` sorts the
recorded graph by node id (creation order is already a topological order)
and runs the closures in reverse.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, op, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf from its inputs."""

    def __init__(self, op, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value produced by '{op}'{where}")
        self.op = op
        self.step = step


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.node_id = next(_node_ids)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    # sum gradient over the axes numpy broadcast along
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, op, parents, backward_fn):
    # a finite sum implies every entry is finite
    if not np.isfinite(np.sum(value)):
        raise NumericError(op)
    requires = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=requires, op=op,
                  parents=parents if requires else (),
                  backward=backward_fn if requires else None)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- primitives -------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return _make(a.data * c, "scale", (a,), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis), "sum", (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def square(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * a.data * g)

    return _make(a.data * a.data, "square", (a,), bw)


def absolute(a):
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, np.sign(a.data) * g)

    return _make(np.abs(a.data), "abs", (a,), bw)


def dot(a, b):
    """Inner product of two vectors, or row-wise inner products of two (n, d) arrays."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim not in (1, 2):
        raise ShapeError("dot", a.shape, b.shape)
    return sum(mul(a, b), axis=-1 if a.data.ndim == 2 else None)


def l1_norm(a, axis=-1):
    return sum(absolute(a), axis=axis)


def l2_norm(a, axis=-1):
    a = as_tensor(a)
    value = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        safe = np.where(value > 0, value, 1.0)
        _accumulate(a, a.data * np.expand_dims(g / safe, axis))

    return _make(value, "l2_norm", (a,), bw)


def silu(a):
    a = as_tensor(a)
    sig = expit(a.data)

    def bw(g):
        _accumulate(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(a.data * sig, "silu", (a,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tensors[0].shape, tensors[-1].shape) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                _accumulate(t, piece)

    return _make(value, "concat", tuple(tensors), bw)


def stop_gradient(a):
    """Same values, cut off from the graph."""
    return Tensor(as_tensor(a).data, requires_grad=False, op="stop_gradient")


def linear_map(a, value, vjp, op="linear_map"):
    """Wrap an externally computed ``value = f(a.data)`` with a user VJP.

    ``vjp(g)`` must return the gradient with respect to ``a`` given the
    upstream gradient ``g`` of the output.
    """
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, vjp(g))

    return _make(np.asarray(value, dtype=np.float64), op, (a,), bw)


# -- reverse pass -------------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        order.append(node)
        stack.extend(p for p in node._parents if p.requires_grad)
    order.sort(key=lambda n: n.node_id, reverse=True)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # interior grads are not kept


def grad_check(fn, arrays, h=1e-6, floor=1e-8):
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a list of Tensors (built from ``arrays``) to a scalar Tensor.
    Errors are scaled by the largest gradient entry, but never by less than
    ``floor``: central differences carry about eps*|f|/h of roundoff, so
    near-zero gradients need an absolute scale.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(fn(leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        numeric = np.zeros_like(leaf.data)
        base = [np.array(a, dtype=np.float64) for a in arrays]
        flat = base[i].reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = fn([Tensor(b) for b in base]).item()
            flat[j] = old - h
            down = fn([Tensor(b) for b in base]).item()
            flat[j] = old
            numeric.reshape(-1)[j] = (up - down) / (2 * h)
        denom = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / denom))
    return worst


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **hyper):
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns new params and mutates ``state``."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError("adam_step", params.shape, grads.shape)
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NumericError(f"adam_step (non-finite grad at {bad[:5].tolist()})", state.step)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
