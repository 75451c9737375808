"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tape`` records every operation as a ``Node`` in creation order; node ids
are therefore a valid topological order of the (acyclic) graph, and
``Tape.backward`` walks them in strictly decreasing id order. Tapes are
cheap and meant to be rebuilt per episode / per outer iteration.

Broadcasting is deliberately restricted to scalar-with-tensor; anything
else goes through the explicit ``expand_last`` / ``expand_rows`` ops so
shape bugs fail loudly.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

__all__ = [
    "ShapeError",
    "NumericsError",
    "Tensor",
    "Node",
    "Tape",
    "GradientMap",
    "set_default_dtype",
    "get_default_dtype",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "square",
    "exp",
    "log",
    "relu",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "reduce_mean",
    "rowmax",
    "logsumexp",
    "softmax",
    "expand_last",
    "expand_rows",
    "fuse_locations",
    "dtype_for",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericsError(ArithmeticError):
    """A public operation produced or consumed non-finite values."""


def dtype_for(precision: int) -> np.dtype:
    """Map a precision in bits (32 or 64) to a numpy float dtype."""
    if precision == 32:
        return np.dtype(np.float32)
    if precision == 64:
        return np.dtype(np.float64)
    raise ValueError(f"unsupported precision: {precision!r} (expected 32 or 64)")


_default_dtype = np.dtype(np.float64)


def set_default_dtype(dtype) -> None:
    """Set the dtype new Tapes use; 64-bit verifies, 32-bit is for speed."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


class Tensor:
    """Dense row-major float array.

    Wraps a contiguous ndarray; ``data`` exposes the flat scalar view, so
    ``prod(shape) == len(data)`` by construction. Values are validated to be
    finite when created through a Tape.
    """

    __slots__ = ("array",)

    def __init__(self, data, dtype=np.float64):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep 0-d shapes intact
        self.array = arr

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the underlying scalars."""
        return self.array.reshape(-1)

    def item(self) -> float:
        return float(self.array)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.array.dtype})"


# A parent edge: (parent node, vjp mapping output-gradient -> parent-gradient).
_Edge = tuple["Node", Callable[[np.ndarray], np.ndarray]]


class Node:
    """One recorded value on a Tape."""

    __slots__ = ("id", "value", "parents", "requires_grad", "tape")

    def __init__(self, nid: int, value: Tensor, parents: tuple, requires_grad: bool, tape: "Tape"):
        self.id = nid
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def array(self) -> np.ndarray:
        return self.value.array

    def item(self) -> float:
        return self.value.item()

    # Operator sugar; floats are wrapped as constants on the same tape.
    def __add__(self, other):
        return add(self, _coerce(self.tape, other))

    def __radd__(self, other):
        return add(_coerce(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _coerce(self.tape, other))

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _coerce(self.tape, other))

    def __rmul__(self, other):
        return mul(_coerce(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _coerce(self.tape, other))

    def __rtruediv__(self, other):
        return div(_coerce(self.tape, other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"


class GradientMap:
    """Result of a backward pass: gradients keyed by node id.

    Nodes that do not lie on any path to the loss get an exact zero
    gradient of their own shape.
    """

    def __init__(self, grads: dict, dtype):
        self._grads = grads
        self._dtype = dtype

    def __getitem__(self, node: Node) -> np.ndarray:
        g = self._grads.get(node.id)
        if g is None:
            return np.zeros(node.shape, dtype=self._dtype)
        return g

    def __contains__(self, node: Node) -> bool:
        return node.id in self._grads


class Tape:
    """Append-only operation recorder for one episode or outer step.

    Single-threaded by design; run independent episodes on independent
    tapes. ``check_finite`` (default on) raises NumericsError as soon as
    any op yields NaN/Inf.
    """

    def __init__(self, dtype=None, check_finite: bool = True):
        self.dtype = np.dtype(dtype) if dtype is not None else _default_dtype
        self.check_finite = check_finite
        self.nodes: list[Node] = []

    def _emit(self, value: np.ndarray, parents: Iterable[_Edge] = (), requires_grad=None) -> Node:
        value = np.asarray(value, dtype=self.dtype)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericsError("operation produced non-finite values")
        parents = tuple(parents)
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p, _ in parents)
        node = Node(len(self.nodes), Tensor(value, dtype=self.dtype), parents, requires_grad, self)
        self.nodes.append(node)
        return node

    def leaf(self, data, requires_grad: bool = False) -> Node:
        """Record an input value with no parents."""
        return self._emit(np.asarray(data, dtype=self.dtype), (), requires_grad)

    def constant(self, data) -> Node:
        return self.leaf(data, requires_grad=False)

    def backward(self, loss: Node) -> GradientMap:
        """Reverse pass from a scalar loss; returns gradients for all
        requires_grad nodes reachable from it."""
        if loss.tape is not self:
            raise ValueError("loss node does not belong to this tape")
        if loss.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[loss.id] = np.ones((), dtype=self.dtype)
        for nid in range(loss.id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            for parent, vjp in self.nodes[nid].parents:
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                acc = grads.get(parent.id)
                if acc is None:
                    grads[parent.id] = np.asarray(contrib, dtype=self.dtype)
                else:
                    grads[parent.id] = acc + contrib
        return GradientMap(grads, self.dtype)


def _coerce(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return tape.constant(np.asarray(x, dtype=tape.dtype))
    raise TypeError(f"cannot use {type(x).__name__} as an operand")


def _same_tape(a: Node, b: Node) -> Tape:
    if a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    return a.tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Only scalar-with-tensor broadcast exists, so the sole contraction
    # needed is summing everything back into a scalar.
    if shape == () and np.ndim(g) != 0:
        return np.sum(g)
    return g


def _check_elementwise(a: Node, b: Node, op: str):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast is allowed)")


def add(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "add")
    return tape._emit(
        a.array + b.array,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ),
    )


def sub(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "sub")
    return tape._emit(
        a.array - b.array,
        (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ),
    )


def mul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "mul")
    av, bv = a.array, b.array
    return tape._emit(
        av * bv,
        (
            (a, lambda g: _unbroadcast(g * bv, a.shape)),
            (b, lambda g: _unbroadcast(g * av, b.shape)),
        ),
    )


def div(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _check_elementwise(a, b, "div")
    av, bv = a.array, b.array
    return tape._emit(
        av / bv,
        (
            (a, lambda g: _unbroadcast(g / bv, a.shape)),
            (b, lambda g: _unbroadcast(-g * av / (bv * bv), b.shape)),
        ),
    )


def scale(a: Node, c: float) -> Node:
    """Multiply by a plain python scalar (not a graph value)."""
    c = float(c)
    return a.tape._emit(a.array * c, ((a, lambda g: g * c),))


def square(a: Node) -> Node:
    av = a.array
    return a.tape._emit(av * av, ((a, lambda g: 2.0 * av * g),))


def exp(a: Node) -> Node:
    out = np.exp(a.array)
    return a.tape._emit(out, ((a, lambda g: g * out),))


def log(a: Node) -> Node:
    av = a.array
    if np.any(av <= 0):
        raise NumericsError("log of non-positive value")
    return a.tape._emit(np.log(av), ((a, lambda g: g / av),))


def relu(a: Node) -> Node:
    av = a.array
    mask = av > 0
    return a.tape._emit(np.where(mask, av, 0.0), ((a, lambda g: g * mask),))


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    av, bv = a.array, b.array
    return tape._emit(
        av @ bv,
        (
            (a, lambda g: g @ bv.T),
            (b, lambda g: av.T @ g),
        ),
    )


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got shape {a.shape}")
    return a.tape._emit(a.array.T, ((a, lambda g: g.T),))


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return a.tape._emit(a.array.reshape(shape), ((a, lambda g: g.reshape(old)),))


def _check_axis(a: Node, axis):
    if axis is not None and not (-a.value.ndim <= axis < a.value.ndim):
        raise ShapeError(f"axis {axis} out of range for shape {a.shape}")


def reduce_sum(a: Node, axis=None) -> Node:
    _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        return a.tape._emit(np.sum(a.array), ((a, lambda g: np.broadcast_to(g, shape).copy()),))

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return a.tape._emit(np.sum(a.array, axis=axis), ((a, vjp),))


def reduce_mean(a: Node, axis=None) -> Node:
    _check_axis(a, axis)
    shape = a.shape
    if axis is None:
        n = a.value.size
        return a.tape._emit(np.mean(a.array), ((a, lambda g: np.broadcast_to(g / n, shape).copy()),))
    n = shape[axis]

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()

    return a.tape._emit(np.mean(a.array, axis=axis), ((a, vjp),))


def rowmax(a: Node) -> Node:
    """Maximum over the last axis; ties feed the gradient to the first argmax."""
    if a.value.ndim < 1:
        raise ShapeError("rowmax needs at least one axis")
    av = a.array
    idx = np.argmax(av, axis=-1)
    out = np.take_along_axis(av, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return full

    return a.tape._emit(out, ((a, vjp),))


def logsumexp(a: Node) -> Node:
    """log sum exp over the last axis, max-shifted for overflow safety."""
    if a.value.ndim < 1:
        raise ShapeError("logsumexp needs at least one axis")
    av = a.array
    m = np.max(av, axis=-1, keepdims=True)
    e = np.exp(av - m)
    s = np.sum(e, axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    p = e / s

    def vjp(g):
        return p * np.asarray(g)[..., None]

    return a.tape._emit(out, ((a, vjp),))


def softmax(a: Node) -> Node:
    """Softmax over the last axis (shift-invariant, max-shifted)."""
    if a.value.ndim < 1:
        raise ShapeError("softmax needs at least one axis")
    av = a.array
    e = np.exp(av - np.max(av, axis=-1, keepdims=True))
    p = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return p * (g - np.sum(g * p, axis=-1, keepdims=True))

    return a.tape._emit(p, ((a, vjp),))


def expand_last(a: Node, k: int) -> Node:
    """Repeat a [...] tensor k times along a new trailing axis."""
    if k < 1:
        raise ShapeError("expand_last needs k >= 1")
    out = np.repeat(a.array[..., None], k, axis=-1)
    return a.tape._emit(out, ((a, lambda g: np.sum(g, axis=-1)),))


def expand_rows(a: Node, m: int) -> Node:
    """Tile a [k] vector into an [m, k] matrix."""
    if a.value.ndim != 1:
        raise ShapeError(f"expand_rows needs a 1-D operand, got shape {a.shape}")
    if m < 1:
        raise ShapeError("expand_rows needs m >= 1")
    out = np.broadcast_to(a.array, (m, a.shape[0])).copy()
    return a.tape._emit(out, ((a, lambda g: np.sum(g, axis=0)),))


def fuse_locations(block: Node, v: Node) -> Node:
    """Weighted sum over the location axis: [B, L, F] x [L] -> [B, F]."""
    tape = _same_tape(block, v)
    if block.value.ndim != 3 or v.value.ndim != 1 or block.shape[1] != v.shape[0]:
        raise ShapeError(f"fuse_locations: got block {block.shape}, weights {v.shape}")
    bv, vv = block.array, v.array
    out = np.einsum("blf,l->bf", bv, vv)
    return tape._emit(
        out,
        (
            (block, lambda g: np.einsum("bf,l->blf", g, vv)),
            (v, lambda g: np.einsum("bf,blf->l", g, bv)),
        ),
    )
