"""Minimal reverse-mode automatic differentiation over numpy arrays.

A computation is built as a graph of `Var` nodes by calling the op functions
in this module (add, mul, matmul, tanh, exp, sum_, ...). `backward(root)`
replays the graph in reverse topological order and accumulates gradients into
`Var.grad`. Only what the flow training / energy minimization needs is
implemented; every op stores explicit vector-Jacobian products.

All values are float64 ndarrays. Python scalars and plain arrays passed to an
op are wrapped as constant leaves.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "constant",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "tanh",
    "exp",
    "sqrt",
    "sum_",
    "reshape",
    "transpose",
    "getitem",
    "concatenate",
    "backward",
]


class Var:
    """One node of the tape: a value plus links to its parents' VJPs."""

    __slots__ = ("value", "parents", "vjps", "grad")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def constant(x) -> Var:
    return Var(x)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value + b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
    )


def sub(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value - b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
    )


def neg(a) -> Var:
    a = _as_var(a)
    return Var(-a.value, (a,), (lambda g: -g,))


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)
    inv = 1.0 / b.value
    return Var(
        a.value * inv,
        (a, b),
        (
            lambda g: _unbroadcast(g * inv, a.value.shape),
            lambda g: _unbroadcast(-g * a.value * inv * inv, b.value.shape),
        ),
    )


def matmul(a, b) -> Var:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    a, b = _as_var(a), _as_var(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    val = a.value @ b.value

    def vjp_a(g):
        return _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.value.shape)

    def vjp_b(g):
        return _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.value.shape)

    return Var(val, (a, b), (vjp_a, vjp_b))


def tanh(a) -> Var:
    a = _as_var(a)
    t = np.tanh(a.value)
    return Var(t, (a,), (lambda g: g * (1.0 - t * t),))


def exp(a) -> Var:
    a = _as_var(a)
    e = np.exp(a.value)
    return Var(e, (a,), (lambda g: g * e,))


def sqrt(a) -> Var:
    a = _as_var(a)
    r = np.sqrt(a.value)
    return Var(r, (a,), (lambda g: g * 0.5 / r,))


def sum_(a, axis=None, keepdims=False) -> Var:
    a = _as_var(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)
    in_shape = a.value.shape

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return np.broadcast_to(g, in_shape).copy()
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            shape = list(in_shape)
            for ax in sorted(ax % len(in_shape) for ax in axes):
                shape[ax] = 1
            g = g.reshape(shape)
        return np.broadcast_to(g, in_shape).copy()

    return Var(val, (a,), (vjp,))


def reshape(a, shape) -> Var:
    a = _as_var(a)
    old = a.value.shape
    return Var(a.value.reshape(shape), (a,), (lambda g: g.reshape(old),))


def transpose(a, axes=None) -> Var:
    a = _as_var(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inverse = np.argsort(axes)
    return Var(
        np.transpose(a.value, axes),
        (a,),
        (lambda g: np.transpose(g, inverse),),
    )


def getitem(a, key) -> Var:
    a = _as_var(a)
    val = a.value[key]

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, key, g)
        return out

    return Var(val, (a,), (vjp,))


def concatenate(parts, axis=0) -> Var:
    parts = [_as_var(p) for p in parts]
    val = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * val.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Var(val, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def _topo_order(root: Var) -> list:
    """Iterative post-order of the graph under `root` (parents before children)."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(root: Var, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into `.grad` for every node under `root`.

    `root` is usually scalar; a custom `seed` gradient may be supplied for
    non-scalar roots.
    """
    order = _topo_order(root)
    for node in order:
        node.grad = None
    if seed is None:
        if root.value.ndim != 0:
            raise ValueError("backward() on a non-scalar root requires a seed gradient")
        seed = np.ones(())
    root.grad = np.asarray(seed, dtype=np.float64)
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib
