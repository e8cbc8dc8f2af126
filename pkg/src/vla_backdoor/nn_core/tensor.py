"""Dense float32 tensors with define-by-run reverse-mode differentiation.

Every op records its parents and a closure that maps the output gradient to
parent gradients. ``backward`` walks the recorded graph once in reverse
topological order and then releases it.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
_active = {"dtype": DTYPE}
# reductions longer than this accumulate in float64
WIDE_REDUCTION = 4096


class NumericalError(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class GraphError(RuntimeError):
    """Backward was requested on a tensor without a live graph."""


def active_dtype():
    return _active["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily compute in ``dtype`` (float64 is used by gradient checks)."""
    prev = _active["dtype"]
    _active["dtype"] = dtype
    try:
        yield
    finally:
        _active["dtype"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_active["dtype"])
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite value produced by {op}")
    return out


def _result(data: np.ndarray, parents: Iterable[Tensor], fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(_check(np.asarray(data, dtype=_active["dtype"]), op))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _sum(a: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    if n > WIDE_REDUCTION:
        return np.sum(a, axis=axis, keepdims=keepdims, dtype=np.float64).astype(_active["dtype"])
    return np.sum(a, axis=axis, keepdims=keepdims, dtype=_active["dtype"])


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = _sum(g, axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = _sum(g, axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.data.ndim != 2:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        if a2.shape[0] > WIDE_REDUCTION:
            gb = (a2.T.astype(np.float64) @ g2.astype(np.float64)).astype(_active["dtype"])
        else:
            gb = a2.T @ g2
        return ga, gb

    return _result(a.data @ b.data, (a, b), fn, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(_active["dtype"]),)

    return _result(_sum(x.data, axis=axis, keepdims=keepdims), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


mean_pool = mean


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs)))

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, fn, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def fn(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt.astype(_active["dtype"]),)

    return _result(table.data[ids], (table,), fn, "embedding")


def place(x: Tensor, shape: tuple[int, ...], index: tuple[slice, ...]) -> Tensor:
    """Zero tensor of ``shape`` with ``x`` written at ``index``."""
    out = np.zeros(shape, dtype=_active["dtype"])
    out[index] = x.data
    return _result(out, (x,), lambda g: (np.ascontiguousarray(g[index]),), "place")


# ---------------------------------------------------------------- probabilistic

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-row negative log-likelihood of integer ``targets``; shape = logits.shape[:-1]."""
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != logits.shape[:-1]:
        raise ValueError(f"targets {t.shape} do not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]

    def fn(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], -1) - 1, -1)
        return (grad * g[..., None],)

    return _result(nll, (logits,), fn, "cross_entropy")


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(mul(d, d))


def sq_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Squared L2 norm along ``axis``."""
    return sum(mul(x, x), axis=axis)


# ---------------------------------------------------------------- backward

def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root._consumed:
        raise GraphError("graph already consumed by a previous backward")
    if not root.requires_grad:
        raise GraphError("tensor has no graph: run a forward pass on trainable inputs first")
    if grad is None:
        if root.size != 1:
            raise ValueError("grad must be given for non-scalar outputs")
        grad = np.ones(root.shape, dtype=_active["dtype"])

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=_active["dtype"])}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check(g, "backward")
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=_active["dtype"])
            grads[id(p)] = grads[id(p)] + pg if id(p) in grads else pg
        node._backward = None
        node._parents = ()
        node._consumed = True
