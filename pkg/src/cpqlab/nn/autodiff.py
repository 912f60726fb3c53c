"""Reverse-mode automatic differentiation over a small, fixed op vocabulary.

Everything is dense 64-bit floats.  A :class:`Var` wraps an ndarray and
remembers how it was produced; :func:`backward` walks the graph once in
reverse topological order and accumulates gradients into the leaves that
were created with ``requires_grad=True``.

The op set (affine/matmul, relu, tanh, exp, log, square, clip, minimum,
concat, sum, mean and basic arithmetic) is deliberately minimal: it covers
every loss in this package and nothing more, which keeps the gradient
checks exhaustive.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class NumericError(RuntimeError):
    """A non-finite value appeared while building or differentiating a graph."""


def _asarray(x) -> Array:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """A node in the computation graph: an ndarray plus its provenance."""

    __slots__ = ("value", "requires_grad", "grad", "_parents", "_op")

    def __init__(self, value, requires_grad: bool = False,
                 parents: tuple = (), op: str = "leaf"):
        self.value = _asarray(value)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._parents = parents  # tuple of (Var, vjp) pairs
        self._op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Var(op={self._op}, shape={self.value.shape})"

    # arithmetic sugar; constants are wrapped on the fly
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is outside the supported op set")
        return mul(self, 1.0 / float(other))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _check_finite(value: Array, op: str) -> None:
    # a single reduction: any nan/inf poisons the sum (inf - inf gives nan)
    if not np.isfinite(value.sum()):
        raise NumericError(f"non-finite value produced by op '{op}'")


def _node(value: Array, op: str, parents: Sequence[tuple[Var, Callable]]) -> Var:
    _check_finite(value, op)
    # Edges into grad-free subgraphs are dropped so frozen networks (targets,
    # critics inside the policy loss) cost nothing on the backward pass.
    live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
    return Var(value, requires_grad=bool(live), parents=live, op=op)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value + b.value
    return _node(out, "add", (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    ))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value - b.value
    return _node(out, "sub", (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    ))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value * b.value
    return _node(out, "mul", (
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    ))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.value @ b.value
    return _node(out, "matmul", (
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    ))


def affine(x, w, b) -> Var:
    """x @ w + b with the bias broadcast over the batch dimension."""
    return add(matmul(x, w), b)


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0.0
    return _node(np.maximum(a.value, 0.0), "relu",
                 ((a, lambda g: g * mask),))


def tanh(a) -> Var:
    a = as_var(a)
    t = np.tanh(a.value)
    return _node(t, "tanh", ((a, lambda g: g * (1.0 - t * t)),))


def exp(a) -> Var:
    a = as_var(a)
    e = np.exp(a.value)
    return _node(e, "exp", ((a, lambda g: g * e),))


def log(a) -> Var:
    a = as_var(a)
    if np.any(a.value <= 0.0):
        raise NumericError("non-positive input to op 'log'")
    return _node(np.log(a.value), "log", ((a, lambda g: g / a.value),))


def square(a) -> Var:
    a = as_var(a)
    return _node(a.value * a.value, "square",
                 ((a, lambda g: g * (2.0 * a.value)),))


def clip(a, lo: float, hi: float) -> Var:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_var(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), "clip",
                 ((a, lambda g: g * mask),))


def minimum(a, b) -> Var:
    """Elementwise min; the gradient follows the smaller branch (ties go to `a`)."""
    a, b = as_var(a), as_var(b)
    take_a = a.value <= b.value
    out = np.where(take_a, a.value, b.value)
    return _node(out, "minimum", (
        (a, lambda g: _unbroadcast(g * take_a, a.value.shape)),
        (b, lambda g: _unbroadcast(g * ~take_a, b.value.shape)),
    ))


def concat(parts: Iterable, axis: int = -1) -> Var:
    parts = [as_var(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return _node(out, "concat", tuple((p, make_vjp(i)) for i, p in enumerate(parts)))


def transpose(a) -> Var:
    a = as_var(a)
    return _node(a.value.T, "transpose", ((a, lambda g: g.T),))


def vsum(a, axis: int | None = None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.value.shape).copy()

    return _node(out, "sum", ((a, vjp),))


def vmean(a, axis: int | None = None) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / n)


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(leaf) into `leaf.grad` for every grad-requiring leaf."""
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node._parents:
            contrib = vjp(g)
            _check_finite(np.asarray(contrib), node._op + ".backward")
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + contrib
            else:
                grads[id(parent)] = np.asarray(contrib, dtype=np.float64)


def grads_of(loss: Var, leaves: Sequence[Var]) -> list[Array]:
    """Run backward once and return gradients for `leaves` (zeros if unused)."""
    for leaf in leaves:
        leaf.grad = None
    backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in leaves]
