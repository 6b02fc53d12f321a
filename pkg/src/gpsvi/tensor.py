"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Every primitive lives in ``OPS`` and is reachable through :func:`apply`.
Applications whose inputs require gradients are appended to the active
:class:`Tape`; :func:`backward` walks that tape in reverse and consumes it.

Broadcasting in binary ops is deliberately narrow: equal shapes, a scalar
operand, or an operand whose shape is a trailing suffix of the other's.
Everything else needs an explicit :func:`broadcast`.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, RankError, ShapeError, TapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_tape", "_gen", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # Set only on tensors produced by a recorded application.
        self._tape: Tape | None = None
        self._gen = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.values.size != 1:
            raise RankError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.values, precision=6)}{flag})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(values) -> Tensor:
    return Tensor(np.array(values, dtype=DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# Tape


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    entries: list[TapeEntry] = field(default_factory=list)
    generation: int = 0
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries.clear()
        self.generation += 1

    def backward(self, loss: Tensor):
        backward(loss)


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("gpsvi_tape", default=None)
_DEFAULT_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("gpsvi_default_tape", default=None)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("gpsvi_grad", default=True)


def current_tape() -> Tape:
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        return tape
    tape = _DEFAULT_TAPE.get()
    if tape is None:
        tape = Tape()
        _DEFAULT_TAPE.set(tape)
    return tape


@contextlib.contextmanager
def no_grad():
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    result = Tensor(out)
    if _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs):
        tape = current_tape()
        result.requires_grad = True
        result._tape = tape
        result._gen = tape.generation
        tape.entries.append(TapeEntry(op, inputs, result, bwd))
    return result


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``; consumes the tape.

    Leaf gradients accumulate, so zero them between independent steps.
    """
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._gen != tape.generation:
        raise TapeError("loss is not on an active tape (was it computed under no_grad or already consumed?)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.clear()


# ---------------------------------------------------------------------------
# Shape helpers


def _is_scalar(shape) -> bool:
    return len(shape) == 0 or shape == (1,)


def _check_binary(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb or _is_scalar(sa) or _is_scalar(sb):
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb} (only trailing/scalar broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` under numpy broadcasting rules."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.values + b.values,
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.values - b.values,
                   lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    av, bv = a.values, b.values
    return _record("mul", (a, b), av * bv,
                   lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    av, bv = a.values, b.values
    if np.any(bv == 0):
        raise DomainError("div: zero divisor")
    out = av / bv
    return _record("div", (a, b), out,
                   lambda g: (_reduce_to(g / bv, av.shape), _reduce_to(-g * out / bv, bv.shape)))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _record("neg", (x,), -x.values, lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.values)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow (argument above ~709)")
    return _record("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    if np.any(xv <= 0):
        raise DomainError(f"log: non-positive input (min {xv.min():.3g})")
    return _record("log", (x,), np.log(xv), lambda g: (g / xv,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    gate = x.values > 0
    return _record("relu", (x,), np.where(gate, x.values, 0.0), lambda g: (g * gate,))


def max0(x) -> Tensor:
    """Hinge ``max(0, x)``; same math as relu, recorded under its own name."""
    x = as_tensor(x)
    gate = x.values > 0
    return _record("max0", (x,), np.where(gate, x.values, 0.0), lambda g: (g * gate,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.values)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.values)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax; masked positions get weight 0, all-masked rows are all 0."""
    x = as_tensor(x)
    xv = x.values
    if mask is None:
        shifted = xv - xv.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != xv.shape:
            raise ShapeError(f"softmax: mask shape {m.shape} != input shape {xv.shape}")
        filled = np.where(m, xv, -np.inf)
        top = filled.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(m, np.exp(np.where(m, xv, 0.0) - top), 0.0)
        denom = e.sum(axis=axis, keepdims=True)
        out = e / np.where(denom > 0, denom, 1.0)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), out, bwd)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    out = x.values.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record("sum", (x,), out, bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)
    count = math.prod(shape[a] for a in axes) if axes else 1
    out = x.values.mean(axis=axes, keepdims=keepdims) if count else x.values.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / max(count, 1), shape),)

    return _record("mean", (x,), out, bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in ts], axis=ax)
    return _record("concat", ts, out, lambda g: tuple(np.split(g, splits, axis=ax)))


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    try:
        out = x.values[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    fancy = _is_fancy(index)

    def bwd(g):
        gz = np.zeros(shape, dtype=DTYPE)
        if fancy:
            np.add.at(gz, index, g)
        else:
            gz[index] += g
        return (gz,)

    return _record("slice", (x,), np.array(out, dtype=DTYPE), bwd)


def take(table, indices) -> Tensor:
    """Row gather ``table[indices]`` along axis 0 (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    shape = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= shape[0]):
        raise ShapeError(f"take: index out of range for table with {shape[0]} rows")
    out = table.values[idx]

    def bwd(g):
        return (_scatter_rows(idx.reshape(-1), g.reshape((-1,) + shape[1:]), shape),)

    return _record("take", (table,), out, bwd)


def _scatter_rows(idx: np.ndarray, rows: np.ndarray, shape) -> np.ndarray:
    """Sum ``rows`` into a zero array of ``shape`` at row positions ``idx``."""
    gz = np.zeros(shape, dtype=DTYPE)
    if idx.size == 0:
        return gz
    order = np.argsort(idx, kind="stable")
    sorted_idx = idx[order]
    uniq, starts = np.unique(sorted_idx, return_index=True)
    gz[uniq] = np.add.reduceat(rows[order], starts, axis=0)
    return gz


def broadcast(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.values, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {src} to {shape}") from None
    return _record("broadcast", (x,), out, lambda g: (_reduce_to(g, src),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose: need ndim >= 2, got {x.shape}")
    return _record("transpose", (x,), np.swapaxes(x.values, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dimensions {a.shape} @ {b.shape}") from None

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _reduce_to(ga, av.shape), _reduce_to(gb, bv.shape)

    return _record("matmul", (a, b), out, bwd)


def dot(a, b) -> Tensor:
    """Inner product along the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "dot")
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("dot: operands must have a last axis")
    av, bv = a.values, b.values
    out = (av * bv).sum(axis=-1)

    def bwd(g):
        ge = g[..., None]
        return _reduce_to(ge * bv, av.shape), _reduce_to(ge * av, bv.shape)

    return _record("dot", (a, b), out, bwd)


def l2norm(x, axis: int = -1, zero_ok: bool = False) -> Tensor:
    """Euclidean norm along ``axis``.

    A zero vector is outside the differentiable domain; with ``zero_ok`` its
    norm is reported as 0 with zero gradient instead of raising.
    """
    x = as_tensor(x)
    xv = x.values
    out = np.sqrt((xv * xv).sum(axis=axis))
    zero = out == 0
    if np.any(zero) and not zero_ok:
        raise DomainError("l2norm: zero vector has no gradient")
    safe = np.where(zero, 1.0, out)

    def bwd(g):
        return (np.expand_dims(g / safe * ~zero, axis) * xv,)

    return _record("l2norm", (x,), out, bwd)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    inside = (xv >= lo) & (xv <= hi)
    return _record("clamp", (x,), np.clip(xv, lo, hi), lambda g: (g * inside,))


def bce_with_logits(logits, labels) -> Tensor:
    """Elementwise binary cross-entropy on logits, log-sum-exp stabilised."""
    x = as_tensor(logits)
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != x.shape:
        raise ShapeError(f"bce_with_logits: labels {y.shape} vs logits {x.shape}")
    xv = x.values
    out = np.maximum(xv, 0.0) - xv * y + np.log1p(np.exp(-np.abs(xv)))
    p = _sigmoid_np(xv)
    return _record("bce_with_logits", (x,), out, lambda g: (g * (p - y),))


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "sum": sum_,
    "mean": mean,
    "max0": max0,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": slice_,
    "take": take,
    "broadcast": broadcast,
    "reshape": reshape,
    "transpose": transpose,
    "dot": dot,
    "l2norm": l2norm,
    "clamp": clamp,
    "bce_with_logits": bce_with_logits,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-6) -> float:
    """Worst relative gap between tape gradients and central differences.

    ``f`` receives the tensor(s) in ``x`` and must be deterministic.  The
    relative error per entry is ``|a - n| / max(1, |a|, |n|)``; a non-finite
    numeric estimate counts as ``inf``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    single = isinstance(x, Tensor)
    xs: list[Tensor] = [x] if single else list(x)
    saved = [t.requires_grad for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None

    def call():
        return f(xs[0]) if single else f(*xs)

    try:
        with Tape():
            loss = call()
            backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]

        worst = 0.0
        with no_grad():
            for t, a in zip(xs, analytic):
                flat = t.values.reshape(-1)
                af = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = call().item()
                    flat[i] = orig - eps
                    down = call().item()
                    flat[i] = orig
                    num = (up - down) / (2 * eps)
                    if not math.isfinite(num):
                        return math.inf
                    err = abs(af[i] - num) / max(1.0, abs(af[i]), abs(num))
                    worst = max(worst, err)
        return worst
    finally:
        for t, s in zip(xs, saved):
            t.requires_grad = s
            t.grad = None


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
