"""A minimal reverse-mode tape over hand-written forward/backward pairs.

Each primitive in the package is a ``forward(*arrays, **kw) -> (out, ctx)`` /
``backward(grad_out, ctx) -> tuple of input grads`` pair.  ``apply`` records
one call; ``backward`` walks the recorded graph in reverse topological order
and sums gradients.  Nothing here differentiates anything by itself.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .kinks import note_kink


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents: Sequence["Var"] = (), backward_fn=None,
                 requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={getattr(self.value, 'shape', ())}, requires_grad={self.requires_grad})"


def const(value) -> Var:
    return value if isinstance(value, Var) else Var(np.asarray(value))


def leaf(value) -> Var:
    return Var(value, requires_grad=True)


def apply(forward: Callable, backward: Callable, inputs: Sequence[Var], **kwargs) -> Var:
    inputs = [const(v) for v in inputs]
    out, ctx = forward(*[v.value for v in inputs], **kwargs)
    if not any(v.requires_grad for v in inputs):
        return Var(out)
    return Var(out, inputs, lambda g: backward(g, ctx))


def backward(root: Var, grad=None) -> None:
    """Populate ``.grad`` on every node that requires it, seeded at ``root``."""
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.value) if grad is None else grad
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g
        if node.parents and node is not root:
            node.grad = None  # interior buffers are not needed once propagated


# ------------------------------------------------------- elementwise glue


def _add_fwd(a, b):
    return a + b, (np.shape(a), np.shape(b))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add_bwd(g, ctx):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def add(a, b) -> Var:
    return apply(_add_fwd, _add_bwd, [a, b])


def _scale_fwd(a, k):
    return a * k, k


def _scale_bwd(g, k):
    return (g * k,)


def scale(a, k: float) -> Var:
    return apply(_scale_fwd, _scale_bwd, [a], k=k)


def _wsum_fwd(*xs, weights):
    return sum(w * x for w, x in zip(weights, xs)), weights


def _wsum_bwd(g, weights):
    return tuple(w * g if w != 0 else None for w in weights)


def weighted_sum(terms: Sequence[Var], weights: Sequence[float]) -> Var:
    return apply(_wsum_fwd, _wsum_bwd, list(terms), weights=tuple(float(w) for w in weights))


def _cat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis), (axis, [x.shape[axis] for x in xs])


def _cat_bwd(g, ctx):
    axis, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def concat(xs: Sequence[Var], axis: int = 1) -> Var:
    return apply(_cat_fwd, _cat_bwd, list(xs), axis=axis)


def _relu_fwd(x):
    mask = x > 0
    note_kink(mask)
    return x * mask, mask


def _relu_bwd(g, mask):
    return (g * mask,)


def relu(x) -> Var:
    return apply(_relu_fwd, _relu_bwd, [x])


def _reshape_fwd(x, shape):
    return x.reshape(shape), x.shape


def _reshape_bwd(g, shape):
    return (g.reshape(shape),)


def reshape(x, shape) -> Var:
    return apply(_reshape_fwd, _reshape_bwd, [x], shape=tuple(shape))
