"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Graph` records every primitive applied to tensors that belong to it.
Tensors created without a graph are constants: ops on them compute values but
record nothing. Leaves that should receive gradients are created with
:meth:`Graph.leaf`.

    g = Graph()
    x = g.leaf(np.array([1.0, 2.0]))
    y = ad.sum(x * x)
    grads = backward(g, y)      # {x: array([2., 4.])}
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible operand shapes {', '.join(map(str, shapes))}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str, node_index: int | None):
        self.op = op
        self.node_index = node_index
        where = f"node {node_index}" if node_index is not None else "untracked op"
        super().__init__(f"non-finite output from {op} at {where}")


class GraphError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array, optionally attached to a recording graph."""

    __slots__ = ("data", "graph", "index", "__weakref__")

    def __init__(self, data, graph: Graph | None = None, index: int = -1):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.graph = graph
        # position in graph.nodes for op outputs, -1 for leaves/constants
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self.shape)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = "const" if self.graph is None else ("leaf" if self.index < 0 else f"node{self.index}")
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _raise_nonscalar(shape):
    raise ShapeError("item", shape)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


class Graph:
    """Append-only record of primitive ops. Single owner while recording."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []

    def leaf(self, data) -> Tensor:
        t = Tensor(np.array(data, dtype=np.float64), self, -1)
        self.leaves.append(t)
        return t

    def leaves_for(self, arrays: Sequence[np.ndarray]) -> list[Tensor]:
        return [self.leaf(a) for a in arrays]

    def _record(self, op, inputs, value, vjp) -> Tensor:
        idx = len(self.nodes)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op, idx)
        out = Tensor(value, self, idx)
        self.nodes.append(Node(op, inputs, out, vjp))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _graph_of(*ts: Tensor) -> Graph | None:
    g = None
    for t in ts:
        if t.graph is not None:
            if g is None:
                g = t.graph
            elif t.graph is not g:
                raise GraphError("operands belong to different graphs")
    return g


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray, vjp) -> Tensor:
    g = _graph_of(*inputs)
    if g is None:
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op, None)
        return Tensor(value)
    return g._record(op, inputs, value, vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad_, bd = a.data, b.data
    return _emit("mul", (a, b), ad_ * bd,
                 lambda g: (_unbroadcast(g * bd, ad_.shape), _unbroadcast(g * ad_, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad_, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad_ / bd
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bd, ad_.shape),
                            _unbroadcast(-g * ad_ / (bd * bd), bd.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    ad_, bd = a.data, b.data
    pick_a = ad_ <= bd
    return _emit("minimum", (a, b), np.where(pick_a, ad_, bd),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), ad_.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad_, bd = a.data, b.data
    if ad_.ndim != 2 or bd.ndim != 2 or ad_.shape[1] != bd.shape[0]:
        raise ShapeError("matmul", ad_.shape, bd.shape)
    return _emit("matmul", (a, b), ad_ @ bd, lambda g: (g @ bd.T, ad_.T @ g))


# ----------------------------------------------------------------- unary ops


def _unary(op, x, value, local_grad):
    x = as_tensor(x)
    v = value(x.data)
    return _emit(op, (x,), v, lambda g: (g * local_grad(x.data, v),))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", (x,), -x.data, lambda g: (-g,))


def square(x) -> Tensor:
    return _unary("square", x, np.square, lambda x, y: 2.0 * x)


def sqrt(x) -> Tensor:
    return _unary("sqrt", x, np.sqrt, lambda x, y: 0.5 / y)


def abs(x) -> Tensor:  # noqa: A001
    return _unary("abs", x, np.abs, lambda x, y: np.sign(x))


def exp(x) -> Tensor:
    with np.errstate(over="ignore"):
        return _unary("exp", x, np.exp, lambda x, y: y)


def log(x) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        return _unary("log", x, np.log, lambda x, y: 1.0 / x)


def sin(x) -> Tensor:
    return _unary("sin", x, np.sin, lambda x, y: np.cos(x))


def cos(x) -> Tensor:
    return _unary("cos", x, np.cos, lambda x, y: -np.sin(x))


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda x, y: 1.0 - y * y)


def relu(x) -> Tensor:
    # subgradient at 0 is 0
    return _unary("relu", x, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x, _sigmoid, lambda x, y: y * (1.0 - y))


def silu(x) -> Tensor:
    def grad(x, y):
        s = _sigmoid(x)
        return s * (1.0 + x * (1.0 - s))

    return _unary("silu", x, lambda x: x * _sigmoid(x), grad)


def softplus(x) -> Tensor:
    return _unary("softplus", x, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only strictly inside the interval."""
    return _unary("clip", x, lambda x: np.clip(x, lo, hi),
                  lambda x, y: ((x > lo) & (x < hi)).astype(np.float64))


# ------------------------------------------------------------ reductions etc.


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))
    if axis >= x.data.ndim:
        raise ShapeError("sum", shape)
    return _emit("sum", (x,), x.data.sum(axis=axis),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    ts = tuple(as_tensor(x) for x in xs)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def columns(x, start: int, stop: int) -> Tensor:
    """Column slice ``x[:, start:stop]`` of a rank-2 tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError("columns", x.shape)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _emit("columns", (x,), x.data[:, start:stop], vjp)


# ------------------------------------------------------------------ backward


def backward(graph: Graph, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Return d(root)/d(leaf) for every leaf of ``graph``.

    Leaves that do not influence ``root`` map to zero arrays.
    """
    if root.size != 1:
        raise ShapeError("backward root must be scalar", root.shape)
    if root.graph is not graph:
        raise GraphError("root was not recorded on this graph")

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    nodes = graph.nodes
    for i in range(root.index, -1, -1):
        node = nodes[i]
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.vjp(g_out)
        for t, g_in in zip(node.inputs, in_grads):
            if t.graph is not graph:
                continue
            if t.index >= i:
                raise GraphError(f"cycle: node {i} consumes node {t.index}")
            key = id(t)
            prev = grads.get(key)
            grads[key] = g_in if prev is None else prev + g_in
    return {leaf: grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in graph.leaves}


def grad_wrt_input(f: Callable[[Tensor], Tensor], s) -> np.ndarray:
    """Gradient of scalar-valued ``f`` at ``s``.

    ``f`` must treat its own parameters as constants so nothing but ``s``
    is differentiated.
    """
    g = Graph()
    x = g.leaf(s)
    out = f(x)
    if out.size != 1:
        raise ShapeError("grad_wrt_input: f must return a scalar", out.shape)
    if out.graph is None:
        return np.zeros_like(x.data)
    return backward(g, out)[x]
