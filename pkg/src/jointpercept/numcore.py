"""Dense tensors with tape-based reverse-mode differentiation.

Every operation checks shapes strictly (no implicit broadcasting; use
:func:`broadcast_to` or :func:`reshape`) and refuses to produce non-finite
values. Operations whose inputs require gradients append a record to the
current thread's :class:`GradientTape`; :meth:`Tensor.backward` replays that
tape in reverse and consumes it.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """An operation produced (or was handed) a non-finite value or a zero norm."""


class UsageError(RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data), copy=True)
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradientTape:
    records: list[TapeRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_local = threading.local()


def current_tape() -> GradientTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = GradientTape()
    return tape


def _recording() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in this thread for the duration of the block."""
    prev = _recording()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run the block against an empty tape, restoring the previous one afterwards."""
    prev = getattr(_local, "tape", None)
    _local.tape = GradientTape()
    try:
        yield _local.tape
    finally:
        _local.tape = prev


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced a non-finite value")
    return out


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    _finite(out, op)
    needs = _recording() and any(t.requires_grad for t in inputs)
    res = Tensor._wrap(out, needs)
    if needs:
        current_tape().records.append(TapeRecord(op, inputs, res, bwd))
    return res


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The current tape is replayed newest-first, each record at most once, and
    cleared afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves[key] = t
    for key, g in grads.items():
        t = leaves[key]
        g = _finite(np.asarray(g, dtype=t.data.dtype), "backward")
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (reshape/broadcast_to explicitly)")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    first = tensors[0]
    for t in tensors[1:]:
        _same_shape("add_n", first, t)
    out = first.data.copy()
    for t in tensors[1:]:
        out = out + t.data
    n = len(tensors)
    return _emit("add_n", out, tuple(tensors), lambda g: (g,) * n)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of a non-positive value")
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    out = (x * cdf).astype(x.dtype)
    return _emit("gelu", out, (a,), lambda g: ((g * (cdf + x * pdf)).astype(x.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {src} -> {shape}: {exc}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the gradient sums over the expanded axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast {a.shape} -> {shape}: {exc}") from None
    src = a.shape
    lead = len(shape) - len(src)
    expanded = tuple(i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def bwd(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if expanded:
            g = g.sum(axis=tuple(i - lead for i in expanded), keepdims=True)
        return (g.reshape(src),)

    return _emit("broadcast_to", out, (a,), bwd)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``[..., m, k] @ [..., k, n]`` with identical batch dims."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: need equal-rank operands of rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} do not conform")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


def take(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take: index out of range for {a.shape[0]} rows")
    src = a.shape

    def bwd(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take", a.data[idx], (a,), bwd)


def getitem(a: Tensor, key) -> Tensor:
    src = a.shape

    def bwd(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)

    try:
        out = np.array(a.data[key])
    except IndexError as exc:
        raise ShapeError(f"getitem: {exc}") from None
    return _emit("getitem", out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def place_rows(n_rows: int, parts: Sequence[tuple[np.ndarray, Tensor]], width: int | None = None,
               dtype=None) -> Tensor:
    """Scatter row blocks into a zero matrix ``[n_rows, D]``.

    ``parts`` pairs an index array with a ``[len(idx), D]`` tensor. Indices
    must be disjoint across and within parts; unfilled rows stay zero.
    """
    parts = [(np.asarray(i, dtype=np.int64), t) for i, t in parts]
    if width is None:
        width = parts[0][1].shape[1]
    if dtype is None:
        dtype = parts[0][1].dtype
    out = np.zeros((n_rows, width), dtype=dtype)
    seen = np.zeros(n_rows, dtype=bool)
    for idx, t in parts:
        if t.shape != (len(idx), width):
            raise ShapeError(f"place_rows: block {t.shape} vs {len(idx)} indices of width {width}")
        if seen[idx].any() or len(np.unique(idx)) != len(idx):
            raise ShapeError("place_rows: overlapping row indices")
        seen[idx] = True
        out[idx] = t.data
    inputs = tuple(t for _, t in parts)
    idxs = [i for i, _ in parts]
    return _emit("place_rows", out, inputs, lambda g: tuple(g[i] for i in idxs))


# ---------------------------------------------------------------------------
# Normalisation, softmax, similarity
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply gain ``gamma`` and bias ``beta`` ([D] each)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} vs feature dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    red = tuple(range(x.ndim - 1))

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit("layer_norm", (xhat * gd + beta.data).astype(xd.dtype), (x, gamma, beta), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", p, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``-true entries.

    Masked entries get exactly zero probability (additive -inf semantics);
    rows with no admissible entry are all zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise ShapeError(f"masked_softmax: mask {mask.shape} vs scores {x.shape}") from None
    neg = np.where(mask, x.data, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(neg - mx)
    s = e.sum(axis=-1, keepdims=True)
    p = (e / np.where(s > 0, s, 1.0)).astype(x.dtype)
    return _emit("masked_softmax", p, (x,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _emit("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    if (norm <= 0).any():
        raise NumericError("l2_normalize: zero-norm vector")
    u = xd / norm
    return _emit("l2_normalize", u, (x,),
                 lambda g: ((g - u * (g * u).sum(axis=axis, keepdims=True)) / norm,))


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors of equal length (scalar tensor)."""
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_sim: need equal-length vectors, got {u.shape} and {v.shape}")
    return sum(mul(l2_normalize(u), l2_normalize(v)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x`` (explicit reshapes inside)."""
    lead = x.shape[:-1]
    h = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        h = add(h, broadcast_to(b, h.shape))
    return reshape(h, lead + (w.shape[1],))


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: dict[str, float]
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor] | dict[str, Tensor], step: float = 1e-5,
               tol: float = 1e-4, max_per_input: int | None = None, floor: float = 1e-6,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the (mutated in place) input tensors.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_per_input`` samples that many random entries per tensor instead of
    all of them.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {f"input{i}": t for i, t in enumerate(inputs)}
    rng = rng or np.random.default_rng(0)
    for t in named.values():
        t.zero_grad()
    with fresh_tape():
        loss = f()
        backward(loss)
    analytic = {k: t.grad.copy() for k, t in named.items()}

    per_input: dict[str, float] = {}
    total = 0
    with no_grad():
        for name, t in named.items():
            flat = t.data.reshape(-1)
            n = flat.size
            if max_per_input is not None and n > max_per_input:
                picks = rng.choice(n, size=max_per_input, replace=False)
            else:
                picks = np.arange(n)
            worst = 0.0
            for i in picks:
                old = flat[i]
                flat[i] = old + step
                fp = f().item()
                flat[i] = old - step
                fm = f().item()
                flat[i] = old
                num = (fp - fm) / (2.0 * step)
                ana = float(analytic[name].reshape(-1)[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
            per_input[name] = worst
            total += len(picks)
    return GradCheckReport(max(per_input.values(), default=0.0), per_input, total, tol)
