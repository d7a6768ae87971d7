"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires a gradient.  ``backward(loss)`` walks the tape once in
reverse order and accumulates gradients into every reachable tensor.

Only one form of broadcasting exists: :func:`add_bias` adds a vector along the
last dimension.  Everything else requires equal shapes.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    """An n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Record:
    __slots__ = ("output", "inputs", "rule")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], rule: Callable):
        self.output = output
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered log of recorded operations for a single forward pass.

    Use as a context manager to make it the active tape for the current
    thread.  Outside any ``with Tape()`` block a per-thread default tape is
    used; it is cleared after each ``backward``.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev
        self._prev = None

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self.records.append(_Record(output, inputs, rule))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            in_grads = rec.rule(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = t
        for key, t in owners.items():
            if t.requires_grad:
                t.grad = grads[key] if t.grad is None else t.grad + grads[key]
        self.clear()


def _active_tape() -> Tape | None:
    if getattr(_state, "no_grad", 0):
        return None
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = getattr(_state, "default_tape", None)
        if tape is None:
            tape = _state.default_tape = Tape()
    return tape


@contextmanager
def no_grad():
    """Disable recording in this thread."""
    _state.no_grad = getattr(_state, "no_grad", 0) + 1
    try:
        yield
    finally:
        _state.no_grad -= 1


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires_grad tensor reachable from ``loss``."""
    if tape is None:
        tape = getattr(_state, "tape", None) or getattr(_state, "default_tape", None)
    if tape is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    tape.backward(loss)


def _make(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, dtype=data.dtype)
    if needs:
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, tuple(inputs), rule)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{op}: non-finite input")


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)  # a Python float never promotes float32 data
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last dimension of ``x``."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last dim of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by a constant; no gradient flows there."""
    keep = np.broadcast_to(keep, x.shape)
    out = np.where(keep, x.data, np.asarray(value, dtype=x.dtype))
    return _make(out, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _make(
        np.asarray(x.data.sum() / n), (x,), lambda g: (np.full(shape, g / n, dtype=x.dtype),)
    )


def l1_norm(x: Tensor) -> Tensor:
    """Sum of absolute values; subgradient at exactly 0 is 0."""
    sign = np.sign(x.data)
    return _make(np.asarray(np.abs(x.data).sum()), (x,), lambda g: (g * sign,))


def xlogx_sum(p: Tensor) -> Tensor:
    """``sum(p * ln p)`` with ``0 ln 0 = 0``; entries must be nonnegative.

    The gradient at an exact zero is taken as 0, which is the right choice for
    masked attention entries (their upstream softmax Jacobian is zero anyway).
    """
    d = p.data
    pos = d > 0
    logp = np.log(np.where(pos, d, 1.0))
    val = np.asarray((d * logp).sum())
    return _make(val, (p,), lambda g: (g * np.where(pos, logp + 1.0, 0.0),))


# ---------------------------------------------------------------------------
# Linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two dimensions.

    ``b`` may be 2-D and shared across the leading dimensions of ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        out = ad @ bd

        def rule(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(out, (a, b), rule)

    out = ad @ bd
    return _make(
        out, (a, b), lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)
    )


def transpose(x: Tensor) -> Tensor:
    """Swap the last two dimensions."""
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split ``x`` into consecutive pieces of the given sizes along ``axis``."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to dim {x.shape[axis]}")
    bounds = np.cumsum(sizes)
    starts = np.concatenate([[0], bounds[:-1]])
    pieces = []
    ax = axis % x.data.ndim
    for s, e in zip(starts, bounds):
        idx = [slice(None)] * x.data.ndim
        idx[ax] = slice(int(s), int(e))
        idx = tuple(idx)

        def rule(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        pieces.append(_make(x.data[idx], (x,), rule))
    return pieces


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor (duplicates allowed)."""
    index = np.asarray(index, dtype=np.int64)

    def rule(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), rule)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), rule)


# ---------------------------------------------------------------------------
# Normalisation and losses
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last dimension, optionally restricted to ``allowed``.

    Disallowed entries come out as exact zeros.  Each row must have at least
    one allowed entry.
    """
    d = x.data
    if np.isnan(d).any():
        raise FloatingPointError("softmax_rows: NaN input")
    if allowed is None:
        shifted = d - d.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        allowed = np.broadcast_to(allowed, d.shape)
        masked = np.where(allowed, d, -np.inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)
        e = np.where(allowed, np.exp(np.where(allowed, shifted, 0.0)), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p.astype(d.dtype, copy=False), (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last dimension, then apply ``gain`` and ``bias``."""
    d = x.data
    n = d.shape[-1]
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(d.ndim - 1))

    def rule(g):
        gx_hat = g * gain.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), rule)


def log_softmax_rows(x: Tensor) -> np.ndarray:
    d = x.data
    shifted = d - d.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: Iterable[int]) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    t = np.asarray(list(targets) if not isinstance(targets, np.ndarray) else targets, dtype=np.int64)
    b, v = logits.shape
    if t.shape != (b,):
        raise ShapeError(f"cross_entropy: {t.shape[0] if t.ndim else 0} targets for {b} rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    logp = log_softmax_rows(logits)
    rows = np.arange(b)
    loss = -logp[rows, t].mean()

    def rule(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        return (grad * (g / b),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), rule)


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
