"""Dense float64 tensors with a reverse-mode gradient tape.

Only the operations the reader network needs are provided. Binary
elementwise ops require identical shapes (or a Python scalar on one side);
the few places that genuinely need a row-vector or constant-mask broadcast
have dedicated ops (``add_bias``, ``mask_mul``) with their own backward rule.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateError(ValueError):
    """A normalisation has no valid entry to normalise over."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def is_finite(self) -> bool:
        ok = bool(np.isfinite(self.data).all())
        if self.grad is not None:
            ok = ok and bool(np.isfinite(self.grad).all())
        return ok

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- tape


class Tape:
    """Operations reachable from a scalar loss, in topological order."""

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
        return cls(order)

    def replay(self, loss: Tensor) -> None:
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.ops):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    # leaves own their grad buffer; interior nodes may alias
                    p.grad = np.array(g, dtype=np.float64) if p._backward is None else g
                else:
                    p.grad = p.grad + g
        # the graph is single-use
        for node in self.ops:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.from_loss(loss).replay(loss)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for (..., k)@(k, n) or batched (B, n, k)@(B, k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        k, n = b.shape
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)

        def rule(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(lead + (k,)), a2.T @ g2

        # one gemm over the flattened leading axes
        return _result((a2 @ b.data).reshape(lead + (n,)), (a, b), rule)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def brule(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _result(a.data @ b.data, (a, b), brule)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,))
    if not isinstance(a, Tensor):
        return add(b, a)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data * c, (a,), lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def one_minus(x: Tensor) -> Tensor:
    return _result(1.0 - x.data, (x,), lambda g: (-g,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "neg": neg,
    "one_minus": one_minus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *args) -> Tensor:
    if op in _UNARY:
        (x,) = args
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = args
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d vector to every row of a (..., d) tensor."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} with bias {b.shape}")
    d = b.shape[0]
    return _result(x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, d).sum(axis=0)))


def mask_mul(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``x`` (dropout, padding)."""
    m = np.asarray(mask, dtype=np.float64)
    try:
        out = x.data * m
    except ValueError as exc:
        raise ShapeError(f"mask_mul: {x.shape} with mask {m.shape}") from exc
    if out.shape != x.shape:
        raise ShapeError(f"mask_mul: mask {m.shape} would grow {x.shape}")
    return _result(out, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------- reductions / structure


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks valid entries (True = keep)."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            mask = np.broadcast_to(mask, z.shape)
        if not mask.any(axis=-1).all():
            raise DegenerateError("softmax_rows: a row has every entry masked")
        z = np.where(mask, z, -np.inf)
    if z.shape[-1] < 1:
        raise DegenerateError("softmax_rows: empty row")
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    y = ez / ez.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), rule)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (feature axis by default)."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    ax = axis % parts[0].ndim
    ref = parts[0].shape[:ax] + parts[0].shape[ax + 1 :]
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or p.shape[:ax] + p.shape[ax + 1 :] != ref:
            raise ShapeError(
                "concat: leading dimensions differ: " + ", ".join(str(q.shape) for q in parts)
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def rule(g):
        return tuple(
            g[(slice(None),) * ax + (slice(bounds[i], bounds[i + 1]),)] for i in range(len(parts))
        )

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, rule)


def concat_features(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=-1)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Contiguous range along one axis (cheaper backward than :func:`index`)."""
    ax = axis % x.ndim
    sl = (slice(None),) * ax + (slice(start, stop),)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        full[sl] = g
        return (full,)

    return _result(x.data[sl], (x,), rule)


def index(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.asarray(x.data[idx]), (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    d = table.shape[1]

    def rule(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
        return (full,)

    return _result(table.data[ids], (table,), rule)


def reverse_padded(x: Tensor, lengths: np.ndarray) -> Tensor:
    """Reverse each sequence of a (B, T, d) batch inside its valid prefix.

    Padded steps stay where they are, so the map is an involution and its
    backward rule is the same permutation.
    """
    B, T = x.shape[0], x.shape[1]
    lengths = np.asarray(lengths, dtype=np.int64)
    t = np.arange(T)[None, :]
    perm = np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)
    rows = np.arange(B)[:, None]
    return _result(x.data[rows, perm], (x,), lambda g: (g[rows, perm],))


def sru_scan(f: Tensor, u: Tensor, c0: Tensor) -> Tensor:
    """Run ``c_t = f_t * c_{t-1} + u_t`` over axis 1 of (B, T, d) inputs.

    ``u`` is the already-gated candidate ``(1 - f_t) * x~_t``. Returns every
    state, shape (B, T, d). This is the only sequential loop in an SRU layer.
    """
    if f.shape != u.shape or f.ndim != 3 or c0.shape != (f.shape[0], f.shape[2]):
        raise ShapeError(f"sru_scan: f {f.shape}, u {u.shape}, c0 {c0.shape}")
    B, T, d = f.shape
    ft = np.ascontiguousarray(f.data.transpose(1, 0, 2))
    ut = np.ascontiguousarray(u.data.transpose(1, 0, 2))
    cs = np.empty((T, B, d))
    c = c0.data
    for t in range(T):
        c = ft[t] * c + ut[t]
        cs[t] = c
    out = cs.transpose(1, 0, 2)

    def rule(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2))
        acc = np.empty((T, B, d))
        carry = np.zeros((B, d))
        for t in range(T - 1, -1, -1):
            carry = gt[t] + carry
            acc[t] = carry
            carry = carry * ft[t]
        prev = np.concatenate([c0.data[None], cs[:-1]], axis=0)
        gf = (acc * prev).transpose(1, 0, 2)
        gu = acc.transpose(1, 0, 2)
        return gf, gu, carry

    return _result(out, (f, u, c0), rule)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
