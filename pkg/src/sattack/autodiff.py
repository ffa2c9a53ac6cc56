"""Small define-by-run reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every primitive applied to tensors that require
gradients. ``tape.backward(loss)`` walks the record once in reverse and
returns the gradient of a scalar loss for every leaf created with
``requires_grad=True``.

    tape = Tape()
    x = tape.leaf(np.ones((2, 3)))
    loss = ad.sum(ad.tanh(x * 2.0))
    grads = tape.backward(loss)
    grads[x]

Conventions at non-differentiable points: ``relu'(0) = 0``, ``max`` routes
the gradient to the lowest-index maximiser, and the gradient of
``norm_rows`` at a zero row is zero.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonScalarLossError(ValueError):
    """``backward`` was called on a tensor with more than one element."""


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "__weakref__")

    # ndarray <op> Tensor must defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return multiply(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so inputs always precede the
    nodes that consume them.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []

    def leaf(self, value, requires_grad: bool = True) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad, tape=self)
        if requires_grad:
            self.leaves.append(t)
        return t

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.data.size != 1:
            raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return {
            leaf: grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in self.leaves
        }


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = None
    for t in inputs:
        if t.requires_grad:
            tape = t.tape
            break
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, requires_grad=True, tape=tape)
    tape.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise binary ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy semantics; ``b`` may be a 2-D weight shared across a batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), vjp)


# elementwise unary ----------------------------------------------------------

def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return _record(y, (x,), lambda g: (g * y,))


def norm_rows(x) -> Tensor:
    """Euclidean norm over the last axis."""
    x = _as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def vjp(g):
        safe = np.where(n > 0.0, n, 1.0)
        scale = np.where(n > 0.0, g / safe, 0.0)
        return (scale[..., None] * x.data,)

    return _record(n, (x,), vjp)


# reductions -----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _record(np.sum(x.data, axis=axes), (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return multiply(sum(x, axis=axes), 1.0 / count)


def max(x, axis: int = -1) -> Tensor:  # noqa: A001 - mirrors numpy
    """Max over one axis; ties send the gradient to the first maximiser."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record(out, (x,), vjp)


# structural -----------------------------------------------------------------

def concatenate(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    axis = axis % out.ndim
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, xs, vjp)


def slice_(x, index) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape)
        if _fancy(index):
            np.add.at(gx, index, g)
        else:
            gx[index] = g
        return (gx,)

    return _record(x.data[index], (x,), vjp)


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _record(out, (x,), lambda g: (g.reshape(old),))


def expand_dims(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    return reshape(x, np.expand_dims(x.data, axis).shape)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _record(out, (x,), lambda g: (_unbroadcast(g, old),))


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    return concatenate([expand_dims(x, axis) for x in xs], axis=axis)


def frobenius(x, keep: int = 0) -> Tensor:
    """Frobenius norm of the trailing axes, keeping the first ``keep`` axes."""
    x = _as_tensor(x)
    return norm_rows(reshape(x, x.shape[:keep] + (-1,)))


def detach(x) -> Tensor:
    return Tensor(_as_tensor(x).data)
