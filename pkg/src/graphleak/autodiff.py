"""Dense-matrix reverse-mode automatic differentiation.

Every value is a 2-D float64 array. Scalars are 1x1 tensors. Operations record
their inputs and an analytic backward rule on the output tensor (define-by-run);
:meth:`Tensor.backward` linearises the reachable graph into a :class:`Tape`
ordered by creation id and walks it in reverse.

Broadcasting is limited to scalar-vs-matrix for the binary elementwise ops;
row/column scaling goes through :func:`scale_rows` / :func:`scale_cols`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_ids = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_2d(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got array with shape {arr.shape}")
    return arr


class Tensor:
    """A dense real matrix that can take part in a recorded computation."""

    __slots__ = ("value", "requires_grad", "grad", "name", "node_id", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == np.float64 and value.ndim == 2 else _as_2d(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, value: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls(value)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise UsageError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


@dataclass
class Tape:
    """Ordered record of the operations reachable from a loss."""

    entries: list[TapeEntry] = field(default_factory=list)
    _nodes: list[Tensor] = field(default_factory=list, repr=False)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t._parents)
        nodes = sorted((t for t in seen.values() if not t.is_leaf), key=lambda t: t.node_id)
        entries = [TapeEntry(t._op, tuple(p.node_id for p in t._parents), t.node_id) for t in nodes]
        return cls(entries, nodes)

    def backward(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.value)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self._nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.is_leaf:
                    leaves[parent.node_id] = parent
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
        if loss.is_leaf and loss.requires_grad:
            leaves[loss.node_id] = loss
        for nid, leaf in leaves.items():
            g = grads[nid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.shape != (1, 1):
        raise UsageError(f"backward() needs a scalar (1x1) loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    Tape.from_loss(loss).backward(loss)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != (1, 1) and b.shape != (1, 1):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.array([[g.sum()]])


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    av, bv = a.value, b.value

    def bw(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(av * bv, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), bw, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.value * c, (a,), lambda g: (g * c,), "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.value + float(c), (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor._from_op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.value > 0, 1.0, slope)
    return Tensor._from_op(a.value * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.value)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    return Tensor._from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)
    return Tensor._from_op(e, (a,), lambda g: (g * e,), "exp")


def log(a: Tensor) -> Tensor:
    v = a.value
    bad = np.argwhere(~(v > 0))
    if bad.size:
        i, j = bad[0]
        raise DomainError(f"log of nonpositive entry {v[i, j]!r} at index ({i}, {j})")
    return Tensor._from_op(np.log(v), (a,), lambda g: (g / v,), "log")


def sqrt(a: Tensor) -> Tensor:
    v = a.value
    bad = np.argwhere(v < 0)
    if bad.size:
        i, j = bad[0]
        raise DomainError(f"sqrt of negative entry {v[i, j]!r} at index ({i}, {j})")
    r = np.sqrt(v)
    return Tensor._from_op(r, (a,), lambda g: (g * 0.5 / r,), "sqrt")


def power(a: Tensor, p: float) -> Tensor:
    v = a.value
    if p < 1 and np.any(v <= 0):
        i, j = np.argwhere(v <= 0)[0]
        raise DomainError(f"power {p} of nonpositive entry {v[i, j]!r} at index ({i}, {j})")
    out = v**p
    return Tensor._from_op(out, (a,), lambda g: (g * p * v ** (p - 1),), "power")


def clamp01(a: Tensor) -> Tensor:
    v = a.value
    inside = (v >= 0.0) & (v <= 1.0)
    return Tensor._from_op(np.clip(v, 0.0, 1.0), (a,), lambda g: (g * inside,), "clamp01")


def elementwise(op: str, a: Tensor, b: Tensor | None = None, **kw) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, leaky_relu, sigmoid, exp, log, clamp01."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"relu": relu, "sigmoid": sigmoid, "exp": exp, "log": log, "clamp01": clamp01}
    if op in binary:
        if b is None:
            raise UsageError(f"{op} needs two operands")
        return binary[op](a, b)
    if op == "leaky_relu":
        return leaky_relu(a, kw.get("slope", 0.2))
    if op in unary:
        return unary[op](a)
    raise UsageError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(av @ bv, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    return Tensor._from_op(np.ascontiguousarray(a.value.T), (a,), lambda g: (np.ascontiguousarray(g.T),), "transpose")


def row_sum(a: Tensor) -> Tensor:
    """n x m -> n x 1."""
    m = a.cols
    return Tensor._from_op(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, m, axis=1),), "row_sum")


def col_sum(a: Tensor) -> Tensor:
    """n x m -> 1 x m."""
    n = a.rows
    return Tensor._from_op(a.value.sum(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g, n, axis=0),), "col_sum")


def scale_rows(a: Tensor, v: Tensor) -> Tensor:
    """Multiply row i of ``a`` by ``v[i, 0]``."""
    if v.shape != (a.rows, 1):
        raise ShapeError(f"scale_rows: need a {a.rows}x1 vector for shape {a.shape}, got {v.shape}")
    av, vv = a.value, v.value

    def bw(g):
        ga = g * vv if a.requires_grad else None
        gv = (g * av).sum(axis=1, keepdims=True) if v.requires_grad else None
        return ga, gv

    return Tensor._from_op(av * vv, (a, v), bw, "scale_rows")


def scale_cols(a: Tensor, v: Tensor) -> Tensor:
    """Multiply column j of ``a`` by ``v[0, j]``."""
    if v.shape != (1, a.cols):
        raise ShapeError(f"scale_cols: need a 1x{a.cols} vector for shape {a.shape}, got {v.shape}")
    av, vv = a.value, v.value

    def bw(g):
        ga = g * vv if a.requires_grad else None
        gv = (g * av).sum(axis=0, keepdims=True) if v.requires_grad else None
        return ga, gv

    return Tensor._from_op(av * vv, (a, v), bw, "scale_cols")


def outer_add(u: Tensor, v: Tensor) -> Tensor:
    """(n x 1, 1 x m) -> n x m with entries u[i] + v[j]."""
    if u.cols != 1 or v.rows != 1:
        raise ShapeError(f"outer_add: need column and row vectors, got {u.shape} and {v.shape}")
    return Tensor._from_op(
        u.value + v.value,
        (u, v),
        lambda g: (g.sum(axis=1, keepdims=True), g.sum(axis=0, keepdims=True)),
        "outer_add",
    )


def center(a: Tensor) -> Tensor:
    """Subtract column means (left-multiplication by the centering matrix)."""
    return Tensor._from_op(
        a.value - a.value.mean(axis=0, keepdims=True),
        (a,),
        lambda g: (g - g.mean(axis=0, keepdims=True),),
        "center",
    )


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(a.value[idx], (a,), bw, "take_rows")


def triu_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def sym_from_triu(vec: Tensor, n: int) -> Tensor:
    """1 x n(n-1)/2 upper-triangle values -> symmetric n x n, zero diagonal."""
    m = n * (n - 1) // 2
    if vec.shape != (1, m):
        raise ShapeError(f"sym_from_triu: need shape (1, {m}) for n={n}, got {vec.shape}")
    iu = triu_indices(n)
    out = np.zeros((n, n))
    out[iu] = vec.value[0]
    out += out.T

    def bw(g):
        return ((g[iu] + g.T[iu]).reshape(1, -1),)

    return Tensor._from_op(out, (vec,), bw, "sym_from_triu")


def triu_values(a: Tensor) -> Tensor:
    """Strict upper triangle of a square tensor as a 1 x n(n-1)/2 row."""
    if a.rows != a.cols:
        raise ShapeError(f"triu_values: need a square tensor, got {a.shape}")
    n = a.rows
    iu = triu_indices(n)

    def bw(g):
        out = np.zeros((n, n))
        out[iu] = g[0]
        return (out,)

    return Tensor._from_op(a.value[iu].reshape(1, -1), (a,), bw, "triu_values")


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def row_softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(s, (a,), bw, "row_softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.value - a.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (a,), bw, "log_softmax")


def cross_entropy(logits: Tensor, labels, idx=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over rows ``idx`` (all rows when None)."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.rows
    idx = np.arange(n) if idx is None else np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise UsageError("cross_entropy over an empty index set")
    z = logits.value[idx]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = labels[idx]
    loss = -logp[np.arange(idx.size), y].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(idx.size), y] -= 1.0
        out = np.zeros(logits.shape)
        np.add.at(out, idx, p * (g[0, 0] / idx.size))
        return (out,)

    return Tensor._from_op(np.array([[loss]]), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def reduce_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return Tensor._from_op(np.array([[a.value.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),), "sum")


def reduce_mean(a: Tensor) -> Tensor:
    shape = a.shape
    size = a.value.size
    return Tensor._from_op(np.array([[a.value.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / size),), "mean")


def frobenius_sq(a: Tensor) -> Tensor:
    v = a.value
    return Tensor._from_op(np.array([[np.vdot(v, v)]]), (a,), lambda g: (2.0 * g[0, 0] * v,), "frobenius_sq")


def trace(a: Tensor) -> Tensor:
    if a.rows != a.cols:
        raise ShapeError(f"trace needs a square tensor, got shape {a.shape}")
    n = a.rows
    return Tensor._from_op(np.array([[np.trace(a.value)]]), (a,), lambda g: (np.eye(n) * g[0, 0],), "trace")


def reduce(op: str, a: Tensor) -> Tensor:
    table = {"sum": reduce_sum, "mean": reduce_mean, "frobenius_sq": frobenius_sq, "trace": trace}
    if op not in table:
        raise UsageError(f"unknown reduction {op!r}")
    return table[op](a)


# ---------------------------------------------------------------------------
# Custom ops and gradient checking
# ---------------------------------------------------------------------------


def custom_op(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, name: str = "custom") -> Tensor:
    """Record a fused operation with a caller-supplied backward rule.

    ``backward_fn(g)`` receives the upstream gradient and returns one gradient
    (or None) per parent.
    """
    return Tensor._from_op(_as_2d(value), tuple(parents), backward_fn, name)


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], epsilon: float = 1e-5) -> float:
    """Max over entries of |analytic - central difference| / max(1, |analytic|)."""
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in inputs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.value.reshape(-1)
            gflat = ga.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + epsilon
                up = f(*inputs).item()
                flat[k] = orig - epsilon
                down = f(*inputs).item()
                flat[k] = orig
                numeric = (up - down) / (2.0 * epsilon)
                err = abs(gflat[k] - numeric) / max(1.0, abs(gflat[k]))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
