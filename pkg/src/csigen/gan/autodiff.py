"""Minimal reverse-mode differentiation kernel on float64 numpy arrays.

Every operation records a vector-Jacobian product built *from these same
operations*, so gradients are themselves differentiable graph nodes and
:func:`grad` can be applied to expressions containing earlier gradients.
That second-order capability is what the critic's gradient penalty needs:
the penalty differentiates the norm of an input gradient with respect to
the network parameters.

ReLU's derivative at exactly 0 is defined as 0, and its activation mask is
captured as a constant at the forward pass; for piecewise-linear networks
this reproduces exact double backpropagation away from the measure-zero
kink set.
"""

from __future__ import annotations

import numpy as np


class Var:
    """One node of the computation graph: a value, its parents, and the
    vector-Jacobian product mapping the node's adjoint to parent adjoints."""

    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(adjoint: Var, shape: tuple) -> Var:
    """Reduce a broadcasted adjoint back to ``shape`` (sum over expanded axes)."""
    if adjoint.shape == shape:
        return adjoint
    extra = len(adjoint.shape) - len(shape)
    if extra > 0:
        adjoint = vsum(adjoint, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and adjoint.shape[i] != 1)
    if axes:
        adjoint = vsum(adjoint, axis=axes, keepdims=True)
    if adjoint.shape != shape:
        adjoint = reshape(adjoint, shape)
    return adjoint


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, (a, b))
    out.vjp = lambda adj: (_unbroadcast(adj, a.shape), _unbroadcast(adj, b.shape))
    return out


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value - b.value, (a, b))
    out.vjp = lambda adj: (_unbroadcast(adj, a.shape), _unbroadcast(mul(adj, -1.0), b.shape))
    return out


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value * b.value, (a, b))
    out.vjp = lambda adj: (
        _unbroadcast(mul(adj, b), a.shape),
        _unbroadcast(mul(adj, a), b.shape),
    )
    return out


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value / b.value, (a, b))
    out.vjp = lambda adj: (
        _unbroadcast(div(adj, b), a.shape),
        _unbroadcast(mul(mul(adj, -1.0), div(out, b)), b.shape),
    )
    return out


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value @ b.value, (a, b))
    out.vjp = lambda adj: (matmul(adj, transpose(b)), matmul(transpose(a), adj))
    return out


def transpose(a) -> Var:
    a = as_var(a)
    out = Var(a.value.T, (a,))
    out.vjp = lambda adj: (transpose(adj),)
    return out


def relu(a) -> Var:
    a = as_var(a)
    mask = (a.value > 0.0).astype(np.float64)  # frozen activation pattern
    out = Var(a.value * mask, (a,))
    out.vjp = lambda adj: (mul(adj, mask),)
    return out


def vsum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = Var(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def backward(adj):
        if axis is None:
            return (broadcast_to(adj, a.shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if keepdims:
            restored = adj
        else:
            kept = list(adj.shape)
            for ax in sorted(ax % len(a.shape) for ax in axes):
                kept.insert(ax, 1)
            restored = reshape(adj, tuple(kept))
        return (broadcast_to(restored, a.shape),)

    out.vjp = backward
    return out


def mean(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    count = a.value.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def broadcast_to(a, shape) -> Var:
    a = as_var(a)
    out = Var(np.broadcast_to(a.value, shape), (a,))
    out.vjp = lambda adj: (_unbroadcast(adj, a.shape),)
    return out


def reshape(a, shape) -> Var:
    a = as_var(a)
    out = Var(a.value.reshape(shape), (a,))
    out.vjp = lambda adj: (reshape(adj, a.shape),)
    return out


def sqrt(a) -> Var:
    a = as_var(a)
    out = Var(np.sqrt(a.value), (a,))
    out.vjp = lambda adj: (mul(adj, div(Var(0.5), out)),)
    return out


def square(a) -> Var:
    a = as_var(a)
    out = Var(a.value * a.value, (a,))
    out.vjp = lambda adj: (mul(adj, mul(a, 2.0)),)
    return out


def concat(parts: list, axis: int) -> Var:
    parts = [as_var(p) for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts))
    sizes = [p.shape[axis] for p in parts]

    def backward(adj):
        grads = []
        offset = 0
        for size in sizes:
            grads.append(narrow(adj, axis, offset, size))
            offset += size
        return tuple(grads)

    out.vjp = backward
    return out


def narrow(a, axis: int, start: int, length: int) -> Var:
    a = as_var(a)
    index = [slice(None)] * len(a.shape)
    index[axis] = slice(start, start + length)
    out = Var(a.value[tuple(index)], (a,))
    out.vjp = lambda adj: (pad_to(adj, a.shape, axis, start),)
    return out


def pad_to(a, shape: tuple, axis: int, start: int) -> Var:
    """Embed ``a`` into a zero array of ``shape`` at ``start`` along ``axis``."""
    a = as_var(a)
    value = np.zeros(shape)
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, start + a.shape[axis])
    value[tuple(index)] = a.value
    out = Var(value, (a,))
    out.vjp = lambda adj: (narrow(adj, axis, start, a.shape[axis]),)
    return out


def _topological_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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


def grad(output: Var, inputs: list[Var], seed: Var | None = None) -> list[Var]:
    """Adjoints of ``output`` with respect to ``inputs``.

    ``seed`` is the adjoint of the output itself (defaults to ones, which for
    a scalar output yields plain gradients).  The returned Vars are graph
    nodes, so expressions built from them remain differentiable.
    """
    if seed is None:
        seed = Var(np.ones_like(output.value))
    adjoints: dict[int, Var] = {id(output): seed}
    order = _topological_order(output)
    for node in reversed(order):
        adjoint = adjoints.get(id(node))
        if adjoint is None or node.vjp is None:
            continue
        for parent, contribution in zip(node.parents, node.vjp(adjoint)):
            if contribution is None:
                continue
            existing = adjoints.get(id(parent))
            adjoints[id(parent)] = contribution if existing is None else add(existing, contribution)
    results = []
    for var in inputs:
        adjoint = adjoints.get(id(var))
        results.append(adjoint if adjoint is not None else Var(np.zeros(var.shape)))
    return results
