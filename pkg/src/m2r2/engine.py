"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is define-by-run: every operation returns a new :class:`Tensor`
holding the result, references to its inputs, and a closure that maps the
output gradient to input gradients. ``backward`` walks the graph once in
reverse topological order and accumulates into ``Tensor.grad``. Graphs are
rebuilt on every forward pass, which keeps recurrent unrolling trivial.

Binary operations require exactly matching shapes; the only broadcasting
supported is scalar-with-tensor. Everything is float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "matmul",
    "concat",
    "softmax",
    "log",
    "sqrt",
    "tensor_sum",
    "mean",
    "pick",
    "reshape",
    "stack_rows",
    "add_bias",
    "take_rows",
    "batch_norm",
    "backward",
    "zero_grads",
    "elementwise",
    "ELEMENTWISE_KINDS",
]


class Tensor:
    """Dense float64 array plus a gradient accumulator in a dynamic graph.

    ``grad`` is ``None`` until a backward pass touches the node (``None``
    means zero). ``requires_grad`` marks trainable leaves; interior nodes
    track whether any trainable leaf is reachable so backward can skip dead
    branches.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_track")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._track = requires_grad

    @classmethod
    def _result(cls, data, parents, backward_fn):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out._parents = parents
        out._backward = backward_fn
        out._track = any(p._track for p in parents)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def pick(self, index: int) -> "Tensor":
        return pick(self, index)

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _promote(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ValueError(
        f"{op}: operands have incompatible shapes {a.data.shape} and {b.data.shape}"
    )


def _fit(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a broadcast gradient back onto a scalar operand
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    _check_binary(a, b, "add")

    def bw(g):
        return (
            _fit(g, a.data.shape) if a._track else None,
            _fit(g, b.data.shape) if b._track else None,
        )

    return Tensor._result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    _check_binary(a, b, "sub")

    def bw(g):
        return (
            _fit(g, a.data.shape) if a._track else None,
            _fit(-g, b.data.shape) if b._track else None,
        )

    return Tensor._result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    _check_binary(a, b, "mul")

    def bw(g):
        return (
            _fit(g * b.data, a.data.shape) if a._track else None,
            _fit(g * a.data, b.data.shape) if b._track else None,
        )

    return Tensor._result(a.data * b.data, (a, b), bw)


def neg(x) -> Tensor:
    x = _promote(x)

    def bw(g):
        return ((-g) if x._track else None,)

    return Tensor._result(-x.data, (x,), bw)


def square(x) -> Tensor:
    x = _promote(x)

    def bw(g):
        return ((2.0 * x.data * g) if x._track else None,)

    return Tensor._result(x.data * x.data, (x,), bw)


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = _promote(x)
    y = _sigmoid_values(x.data)

    def bw(g):
        return ((y * (1.0 - y) * g) if x._track else None,)

    return Tensor._result(y, (x,), bw)


def tanh(x) -> Tensor:
    x = _promote(x)
    y = np.tanh(x.data)

    def bw(g):
        return (((1.0 - y * y) * g) if x._track else None,)

    return Tensor._result(y, (x,), bw)


def relu(x) -> Tensor:
    x = _promote(x)

    def bw(g):
        return (((x.data > 0) * g) if x._track else None,)

    return Tensor._result(np.maximum(x.data, 0.0), (x,), bw)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _promote(x)

    def bw(g):
        return ((np.where(x.data > 0, 1.0, slope) * g) if x._track else None,)

    return Tensor._result(np.where(x.data > 0, x.data, slope * x.data), (x,), bw)


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands; 1-D @ 1-D is the dot product."""
    a, b = _promote(a), _promote(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ValueError(f"matmul: only 1-D/2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise ValueError(f"matmul: inner dimensions disagree, {ad.shape} and {bd.shape}")
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a._track:
            if ad.ndim == 1 and bd.ndim == 1:
                ga = g * bd
            elif ad.ndim == 2 and bd.ndim == 1:
                ga = np.outer(g, bd)
            elif ad.ndim == 1 and bd.ndim == 2:
                ga = bd @ g
            else:
                ga = g @ bd.T
        if b._track:
            if ad.ndim == 1 and bd.ndim == 1:
                gb = g * ad
            elif ad.ndim == 2 and bd.ndim == 1:
                gb = ad.T @ g
            elif ad.ndim == 1 and bd.ndim == 2:
                gb = np.outer(ad, g)
            else:
                gb = ad.T @ g
        return ga, gb

    return Tensor._result(out, (a, b), bw)


def concat(xs, axis: int = 0) -> Tensor:
    xs = tuple(_promote(x) for x in xs)
    if not xs:
        raise ValueError("concat: need at least one input")
    ndim = xs[0].data.ndim
    for x in xs[1:]:
        if x.data.ndim != ndim:
            raise ValueError(
                f"concat: rank mismatch, {xs[0].data.shape} vs {x.data.shape}"
            )
        for d in range(ndim):
            if d != axis % ndim and x.data.shape[d] != xs[0].data.shape[d]:
                raise ValueError(
                    f"concat: shapes {xs[0].data.shape} and {x.data.shape} "
                    f"disagree off axis {axis}"
                )
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)

    def bw(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if x._track else None for p, x in zip(pieces, xs))

    return Tensor._result(out, xs, bw)


def softmax(x) -> Tensor:
    """Stable softmax of a nonempty 1-D vector."""
    x = _promote(x)
    if x.data.ndim != 1 or x.data.size == 0:
        raise ValueError(f"softmax: need a nonempty vector, got shape {x.data.shape}")
    e = np.exp(x.data - x.data.max())
    y = e / e.sum()

    def bw(g):
        if not x._track:
            return (None,)
        return (y * (g - float(g @ y)),)

    return Tensor._result(y, (x,), bw)


def log(x, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first."""
    x = _promote(x)
    xd = np.maximum(x.data, floor) if floor is not None else x.data
    out = np.log(xd)

    def bw(g):
        if not x._track:
            return (None,)
        grad = g / xd
        if floor is not None:
            grad = np.where(x.data >= floor, grad, 0.0)
        return (grad,)

    return Tensor._result(out, (x,), bw)


def sqrt(x) -> Tensor:
    x = _promote(x)
    y = np.sqrt(x.data)

    def bw(g):
        if not x._track:
            return (None,)
        # subgradient 0 at exactly zero
        return (np.where(x.data > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0) * g,)

    return Tensor._result(y, (x,), bw)


def tensor_sum(x) -> Tensor:
    x = _promote(x)
    shape = x.data.shape

    def bw(g):
        return (np.full(shape, float(g)) if x._track else None,)

    return Tensor._result(np.asarray(x.data.sum()), (x,), bw)


def mean(x) -> Tensor:
    x = _promote(x)
    return tensor_sum(x) * (1.0 / x.data.size)


def pick(x, index: int) -> Tensor:
    """Select one element by flat index; gradient scatters back to it."""
    x = _promote(x)
    flat = x.data.reshape(-1)
    if not 0 <= index < flat.size:
        raise IndexError(f"pick: index {index} out of range for size {flat.size}")

    def bw(g):
        if not x._track:
            return (None,)
        gx = np.zeros_like(x.data)
        gx.reshape(-1)[index] = float(g)
        return (gx,)

    return Tensor._result(np.asarray(flat[index]), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _promote(x)
    orig = x.data.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(orig) if x._track else None,)

    return Tensor._result(out, (x,), bw)


def stack_rows(vectors) -> Tensor:
    """Stack equal-length 1-D tensors into a matrix, one per row."""
    return concat([reshape(v, (1, -1)) for v in vectors], axis=0)


def add_bias(x, b) -> Tensor:
    """Add a (D,) bias vector to every row of an (N, D) matrix."""
    x, b = _promote(x), _promote(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"add_bias: need (N, D) and (D,), got {x.data.shape} and {b.data.shape}"
        )

    def bw(g):
        return (
            g if x._track else None,
            g.sum(axis=0) if b._track else None,
        )

    return Tensor._result(x.data + b.data, (x, b), bw)


def take_rows(x, indices) -> Tensor:
    """Select rows of a matrix by index; gradient scatter-adds back."""
    x = _promote(x)
    if x.data.ndim != 2:
        raise ValueError(f"take_rows: need a matrix, got shape {x.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError(
            f"take_rows: indices out of range for {x.data.shape[0]} rows"
        )
    out = x.data[idx]

    def bw(g):
        if not x._track:
            return (None,)
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor._result(out, (x,), bw)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    momentum: float = 0.9,
    eps: float = 1e-5,
    training: bool = True,
) -> Tensor:
    """Per-column batch normalization of an (N, D) matrix.

    Training mode normalizes by batch statistics and folds them into the
    running buffers (``running = momentum * running + (1 - momentum) * batch``,
    mutated in place); eval mode normalizes by the running buffers.
    """
    x, gamma, beta = _promote(x), _promote(gamma), _promote(beta)
    xd = x.data
    if xd.ndim != 2:
        raise ValueError(f"batch_norm: need a 2-D input, got shape {xd.shape}")
    n = xd.shape[0]
    if training:
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        ggamma = (g * xhat).sum(axis=0) if gamma._track else None
        gbeta = g.sum(axis=0) if beta._track else None
        if not x._track:
            return None, ggamma, gbeta
        dxhat = g * gamma.data
        if training:
            gx = (inv / n) * (
                n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
            )
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return Tensor._result(out, (x, gamma, beta), bw)


ELEMENTWISE_KINDS = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "add": add,
    "mul": mul,
    "sub": sub,
    "neg": neg,
    "square": square,
}


def elementwise(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an elementwise op by name; see ``ELEMENTWISE_KINDS``."""
    try:
        fn = ELEMENTWISE_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``grad`` for every reachable node.

    The root must be scalar. Gradients are accumulated for the current pass
    in a side table and only then added to ``grad``, so repeated calls on
    roots that share subgraphs sum correctly instead of double-counting.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p._track or p.requires_grad):
                stack.append((p, False))

    local: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = local.get(id(node))
        if g is None or node._backward is None:
            continue
        contributions = node._backward(g)
        for parent, contrib in zip(node._parents, contributions):
            if contrib is None:
                continue
            key = id(parent)
            acc = local.get(key)
            if acc is None:
                # copy anything aliasing g (or a view into it) before it can
                # be mutated by later accumulation
                if contrib is g or contrib.base is not None:
                    contrib = np.array(contrib)
                local[key] = contrib
            else:
                acc += contrib

    for node in topo:
        g = local.get(id(node))
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=np.float64)
        else:
            node.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
