"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array. Tensors produced by a recorded operation keep
references to their parent tensors plus a closure mapping the incoming
adjoint to per-parent adjoints. ``backward`` on a scalar root walks the
graph once in reverse topological order and accumulates exact gradients for
every tensor that requires them.

The recorded-op set is deliberately small: add, multiply, matmul,
elementwise tanh/relu/log/square/exp, reduce-sum, reduce-mean,
gather-by-index and pairwise-squared-distance. Everything else in the
package (division, square roots, clamps) is composed from these, so the
gradient of any loss is exact by construction.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "DomainError",
    "Tensor",
    "add",
    "mul",
    "matmul",
    "tanh",
    "relu",
    "log",
    "exp",
    "square",
    "reduce_sum",
    "reduce_mean",
    "gather",
    "pairwise_sqdist",
    "neg",
    "sub",
    "div",
    "sqrt_pos",
    "clamp_min",
    "backward",
]

_node_ids = itertools.count()


class DomainError(ValueError):
    """A recorded op was evaluated outside its domain (e.g. log of x <= 0)."""

    def __init__(self, message: str, node_id: int):
        super().__init__(f"{message} (node {node_id})")
        self.node_id = node_id


class Tensor:
    """Dense float64 array participating in a recorded computation.

    ``requires_grad`` marks trainable leaves; it propagates automatically to
    anything computed from them. Values are treated as immutable once the
    tensor enters a graph; the only sanctioned mutation is the optimizer
    updating leaf parameter values between steps.
    """

    __slots__ = ("values", "grad", "node_id", "requires_grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, _parents=(), _vjp=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._vjp = _vjp
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, id={self.node_id})"

    # arithmetic sugar; floats/arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = np.add(a.values, b.values)

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = np.multiply(a.values, b.values)

    def vjp(g):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    """a @ b, or a @ b.T when transpose_b (weights are stored [out, in])."""
    a, b = _wrap(a), _wrap(b)
    bv = b.values.T if transpose_b else b.values
    out = a.values @ bv

    def vjp(g):
        ga = g @ bv.T
        gb = g.T @ a.values if transpose_b else a.values.T @ g
        return ga, gb

    return Tensor(out, _parents=(a, b), _vjp=vjp)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.values)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.values, 0.0)

    def vjp(g):
        # subgradient at the kink is 0
        return (g * (a.values > 0.0),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.values <= 0.0):
        raise DomainError("log of non-positive value", a.node_id)
    out = np.log(a.values)

    def vjp(g):
        return (g / a.values,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.values)

    def vjp(g):
        return (g * out,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def square(a) -> Tensor:
    a = _wrap(a)
    out = a.values * a.values

    def vjp(g):
        return (g * 2.0 * a.values,)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    out = a.values.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.values.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.values.shape).copy(),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    out = a.values.mean(axis=axis)
    count = a.values.size if axis is None else a.values.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.values.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.values.shape).copy(),)

    return Tensor(out, _parents=(a,), _vjp=vjp)


def gather(a, indices, axis: int | None = None) -> Tensor:
    """Select entries of ``a`` by integer index.

    ``axis=None`` indexes the flattened values; the output takes the shape of
    ``indices``. ``axis=0``/``axis=1`` select rows/columns of a 2-D tensor.
    Indices are constants: gradients scatter-add back into the source only.
    """
    a = _wrap(a)
    idx = np.asarray(indices)
    if axis is None:
        out = a.values.ravel()[idx]

        def vjp(g):
            ga = np.zeros(a.values.size)
            np.add.at(ga, idx.ravel(), np.asarray(g).ravel())
            return (ga.reshape(a.values.shape),)

    elif axis in (0, 1):
        out = np.take(a.values, idx, axis=axis)

        def vjp(g):
            ga = np.zeros_like(a.values)
            if axis == 0:
                np.add.at(ga, idx, g)
            else:
                np.add.at(ga.T, idx, np.moveaxis(np.asarray(g), 1, 0))
            return (ga,)

    else:
        raise ValueError(f"gather supports axis None, 0 or 1, got {axis}")

    return Tensor(out, _parents=(a,), _vjp=vjp)


def pairwise_sqdist(a, b) -> Tensor:
    """Squared distances (a_i - b_j)^2 between two batches of scalar points.

    Accepts shapes [n] or [n, 1]; returns [n_a, n_b]. The same tensor may be
    passed on both sides, in which case gradients from both roles accumulate.
    """
    a, b = _wrap(a), _wrap(b)
    av = a.values.reshape(-1)
    bv = b.values.reshape(-1)
    diff = av[:, None] - bv[None, :]
    out = diff * diff

    def vjp(g):
        gd = g * 2.0 * diff
        ga = gd.sum(axis=1).reshape(a.values.shape)
        gb = (-gd.sum(axis=0)).reshape(b.values.shape)
        return ga, gb

    return Tensor(out, _parents=(a, b), _vjp=vjp)


# --- composites (exact gradients via the primitives above) ---


def neg(a) -> Tensor:
    return mul(a, -1.0)


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def div(a, b) -> Tensor:
    """a / b for strictly positive b, as a * exp(-log b)."""
    return mul(a, exp(neg(log(b))))


def sqrt_pos(a) -> Tensor:
    """Square root of a strictly positive tensor, as exp(0.5 * log a)."""
    return exp(mul(log(a), 0.5))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is 0 where the clamp is active."""
    return add(relu(sub(a, floor)), floor)


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Propagate adjoints from a scalar root; returns {node_id: gradient}.

    Gradients are accumulated for every tensor with requires_grad reachable
    from the root, and also written to each such tensor's ``grad`` buffer.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")

    # reverse topological order, iterative to spare the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen or not node.requires_grad:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
    by_id: dict[int, Tensor] = {t.node_id: t for t in order}
    for node in reversed(order):
        g = grads.get(node.node_id)
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(parent.node_id)
            grads[parent.node_id] = pg if acc is None else acc + pg

    for node_id, g in grads.items():
        by_id.get(node_id, root).grad = g
    return grads
