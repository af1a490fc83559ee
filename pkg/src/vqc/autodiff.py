"""Small reverse-mode autodiff over dense float64 numpy arrays.

Every op builds a ``Node`` holding its value, its parents and a closure that
maps the output gradient to parent gradients.  ``backward`` walks the graph in
reverse topological order exactly once.

Broadcasting is deliberately restricted: elementwise binary ops accept equal
shapes or a size-1 operand.  Row-wise bias addition goes through ``affine`` /
``add_rowvec`` so that shape mistakes in the loss wiring fail loudly.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "requires_grad", "parents", "_backward", "op", "name")

    def __init__(self, value, parents: tuple = (), backward_fn: Callable | None = None,
                 op: str = "leaf", requires_grad: bool | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self._backward = backward_fn
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = bool(requires_grad)
        # interior nodes get a gradient only once backward reaches them
        self.grad = np.zeros_like(self.value) if self.requires_grad and not parents else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str | None = None) -> Node:
    """Trainable leaf."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents: Sequence[Node], backward_fn, op: str) -> Node:
    if not any(p.requires_grad for p in parents):
        return Node(value, (), None, op=op, requires_grad=False)
    return Node(value, tuple(parents), backward_fn, op=op)


def _check_binary(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to a size-1 operand's shape."""
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)
    return _make(a.value * b.value, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_binary(a, b, "div")
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * a.value / b.value ** 2, b.shape))
    return _make(out, (a, b), bw, "div")


def neg(a: Node) -> Node:
    a = as_node(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def square(a: Node) -> Node:
    a = as_node(a)
    return _make(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,), "square")


def sqrt(a: Node) -> Node:
    a = as_node(a)
    if np.any(a.value < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


# ---------------------------------------------------------------- activations

def tanh(a: Node) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out ** 2),), "tanh")


def sigmoid(a: Node) -> Node:
    a = as_node(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Node) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return (g @ b.value.T if a.requires_grad else None,
                a.value.T @ g if b.requires_grad else None)
    return _make(a.value @ b.value, (a, b), bw, "matmul")


def add_rowvec(x, b) -> Node:
    """(n, d) + (d,) with the vector repeated over rows."""
    x, b = as_node(x), as_node(b)
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: {x.shape} + {b.shape}")
    return _make(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)), "add_rowvec")


def affine(x, w, b) -> Node:
    return add_rowvec(matmul(x, w), b)


def batch_matvec(a, v) -> Node:
    """out[i] = a[i] @ v[i] for a of shape (n, p, q) and v of shape (n, q)."""
    a, v = as_node(a), as_node(v)
    if a.value.ndim != 3 or v.value.ndim != 2 or a.shape[0] != v.shape[0] or a.shape[2] != v.shape[1]:
        raise ShapeError(f"batch_matvec: {a.shape} x {v.shape}")

    def bw(g):
        return (np.einsum("ip,iq->ipq", g, v.value) if a.requires_grad else None,
                np.einsum("ipq,ip->iq", a.value, g) if v.requires_grad else None)
    return _make(np.einsum("ipq,iq->ip", a.value, v.value), (a, v), bw, "batch_matvec")


# ---------------------------------------------------------------- reductions / structure

def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    if axis is not None and not -a.value.ndim <= axis < a.value.ndim:
        raise IndexError(f"axis {axis} out of range for shape {a.shape}")

    def bw(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _make(a.value.sum(axis=axis), (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.shape[axis]
    return div(sum(a, axis), float(n))


def concat(nodes: Iterable, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ValueError("concat of empty list")
    ndim = nodes[0].value.ndim
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range")
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(out, nodes, bw, "concat")


def slice(a, start: int, stop: int, axis: int = -1) -> Node:  # noqa: A001
    a = as_node(a)
    n = a.shape[axis]
    if not 0 <= start <= stop <= n:
        raise IndexError(f"slice [{start}:{stop}] out of range for axis of length {n}")
    index = [np.s_[:]] * a.value.ndim
    index[axis] = np.s_[start:stop]
    index = tuple(index)

    def bw(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)
    return _make(a.value[index].copy(), (a,), bw, "slice")


def reshape(a, shape: tuple) -> Node:
    a = as_node(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take_columns(table, idx) -> Node:
    """Rows out[i] = table[:, idx[i]]; gradient scatters back into the picked columns."""
    table = as_node(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.value.ndim != 2 or idx.ndim != 1:
        raise ShapeError("take_columns expects a 2-D table and 1-D indices")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[1]):
        raise IndexError("column index out of range")

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full.T, idx, g)
        return (full,)
    return _make(table.value[:, idx].T.copy(), (table,), bw, "take_columns")


class _FrozenStops(threading.local):
    mode: str | None = None
    values: list | None = None
    pos: int = 0


_frozen = _FrozenStops()


def stop_gradient(a) -> Node:
    """Identity forward, zero partial derivatives backward.

    Inside ``freeze_stop_gradients`` the forward value is recorded, or replayed
    from an earlier recording, so a finite-difference oracle can evaluate the
    surrogate function in which every stopped value is a constant.
    """
    a = as_node(a)
    value = a.value.copy()
    if _frozen.mode == "record":
        _frozen.values.append(value.copy())
    elif _frozen.mode == "replay":
        value = _frozen.values[_frozen.pos].copy()
        _frozen.pos += 1
    return Node(value, (), None, op="stop_gradient", requires_grad=False)


def replaying_stop_gradients() -> bool:
    return _frozen.mode == "replay"


@contextlib.contextmanager
def freeze_stop_gradients(mode: str, values: list):
    """``mode="record"`` appends every stopped value to ``values``; ``"replay"`` reuses them in order."""
    if mode not in ("record", "replay"):
        raise ValueError(f"unknown mode {mode!r}")
    saved = (_frozen.mode, _frozen.values, _frozen.pos)
    _frozen.mode, _frozen.values, _frozen.pos = mode, values, 0
    try:
        yield
        if mode == "replay" and _frozen.pos != len(values):
            raise RuntimeError(f"replayed {_frozen.pos} of {len(values)} stopped values")
    finally:
        _frozen.mode, _frozen.values, _frozen.pos = saved


# ---------------------------------------------------------------- backward

class Tape:
    """Topological record of one forward pass, built from its output node."""

    def __init__(self, output: Node):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Node) -> list[Node]:
        order: list[Node] = []
        seen: set[int] = set()
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
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = node.grad + g if node.grad is not None else g.copy()
            if node._backward is None:
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)


def backward(loss: Node) -> Tape:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires grad."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    if loss.requires_grad:
        tape.backward()
    return tape
