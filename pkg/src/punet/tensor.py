"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`Node` carrying a global
sequence number.  ``backward`` gathers the nodes reachable from the loss and
replays them in decreasing sequence order, which is the reverse of execution
order, so each node is visited exactly once after all of its consumers have
contributed their gradients.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from .errors import DomainError, GraphError, NumericalOverflow, ShapeMismatch

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# name -> callable; the gradient-check suite enumerates this
OPS: dict[str, object] = {}

_seq = itertools.count()
_state = threading.local()


def register(name):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("name", "inputs", "backward_fn", "seq", "consumed")

    def __init__(self, name, inputs, backward_fn):
        self.name = name
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data, inputs, backward_fn, name) -> Tensor:
    """Wrap ``data`` as an op output, recording a node when any input needs grad."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(name, tuple(inputs), backward_fn)
    return out


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- backward ---------------------------------------------------------------


def graph_op_counts(out: Tensor) -> dict[str, int]:
    """Count recorded nodes by op name in the graph that produced ``out``."""
    counts: dict[str, int] = {}
    seen = set()
    stack = [out]
    while stack:
        node = stack.pop()._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        counts[node.name] = counts.get(node.name, 0) + 1
        stack.extend(node.inputs)
    return counts


def backward(loss: Tensor, retain_graph=False):
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise GraphError("backward() needs a scalar tensor")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    reachable = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in reachable:
            continue
        if node.consumed:
            raise GraphError(
                f"graph through '{node.name}' was already consumed; "
                "pass retain_graph=True to backpropagate twice"
            )
        reachable[id(node)] = (node, t)
        stack.extend(node.inputs)

    grads = {id(loss): seed}
    for node, out in sorted(reachable.values(), key=lambda nt: -nt[0].seq):
        g = grads.pop(id(out), None)
        if g is not None:
            for inp, ig in zip(node.inputs, node.backward_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    ig = np.asarray(ig, dtype=inp.dtype)
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                else:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig
        if not retain_graph:
            node.consumed = True
            node.backward_fn = None


# -- elementwise ------------------------------------------------------------


@register("add")
def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_check(a, b, "add")
    return make_result(
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
        "add",
    )


@register("sub")
def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_check(a, b, "sub")
    return make_result(
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
        "sub",
    )


@register("mul")
def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_check(a, b, "mul")
    return make_result(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
        "mul",
    )


@register("div")
def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return make_result(
        out,
        (a, b),
        lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


@register("neg")
def neg(a) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


@register("log")
def log(x) -> Tensor:
    if np.any(x.data <= 0) or np.any(np.isnan(x.data)):
        raise DomainError("log() received a non-positive element")
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


@register("exp")
def exp(x) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NumericalOverflow("exp() overflowed", {"op": "exp"})
    return make_result(out, (x,), lambda g: (g * out,), "exp")


@register("sigmoid")
def sigmoid(x) -> Tensor:
    s = expit(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


@register("softplus")
def softplus(x) -> Tensor:
    return make_result(
        np.logaddexp(0, x.data).astype(x.dtype, copy=False),
        (x,),
        lambda g: (g * expit(x.data),),
        "softplus",
    )


@register("clamp_min")
def clamp_min(x, c) -> Tensor:
    """``max(x, c)``; the gradient goes to ``x`` where ``x > c`` and to ``c`` elsewhere."""
    x = _lift(x)
    c = _lift(c, x)
    _broadcast_check(x, c, "clamp_min")
    keep = x.data > c.data
    return make_result(
        np.maximum(x.data, c.data),
        (x, c),
        lambda g: (unbroadcast(g * keep, x.shape), unbroadcast(g * ~keep, c.shape)),
        "clamp_min",
    )


@register("relu")
def relu(x) -> Tensor:
    keep = x.data > 0
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "relu")


# -- reductions and views ---------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@register("sum")
def sum_(x, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_result(out, (x,), bw, "sum")


@register("mean")
def mean(x, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return make_result(out, (x,), bw, "mean")


@register("reshape")
def reshape(x, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from None
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x) -> Tensor:
    return reshape(x, (x.shape[0], -1))
