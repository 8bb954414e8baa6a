"""Minimal reverse-mode autodiff on float64 numpy arrays.

Operations append a record to the active tape whenever one of their inputs
requires a gradient. ``backward`` replays the tape in reverse, accumulates
gradients into ``Tensor.grad`` and then discards the tape.

Broadcasting is deliberately narrow. Binary elementwise ops accept:

* identical shapes,
* a scalar (size-1) operand,
* an operand whose shape is a trailing suffix of the other's (bias rows),
* shapes that agree except for a trailing 1 (a per-cell map scaling a
  feature volume).

Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "tensor",
    "constant",
    "no_grad",
    "current_tape",
    "forward_op",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "softmax",
    "exp",
    "log",
    "mean",
    "sum",
    "concat",
    "dot",
    "l2_distance",
    "scale",
    "reshape",
    "backward",
    "zero_grad",
    "sgd_step",
    "grad_check",
]


class ShapeError(ValueError):
    def __init__(self, kind: str, *shapes):
        self.kind = kind
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"shape mismatch in {kind}: {joined}")


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ids = itertools.count()


class Tensor:
    """An n-d float64 array that can carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


# --------------------------------------------------------------------------
# tape


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    enabled: bool = True

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _record(kind, inputs, out_data, grad_fn) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        names = [t.name or f"#{t.id}" for t in inputs]
        raise NonFiniteError(f"non-finite output from {kind} (inputs: {', '.join(names)})")
    tape = current_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs
    out.name = None
    out.id = next(_ids)
    if needs:
        tape.records.append(Record(kind, tuple(inputs), out, grad_fn))
    return out


# --------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return True
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return True
    if len(a) == len(b) and a[:-1] == b[:-1] and (a[-1] == 1 or b[-1] == 1):
        return True
    return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError("mul_elementwise", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("mul_elementwise", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Accepts 2-d @ 2-d, batched @ 2-d, 2-d @ batched, and batched @ batched
    with identical leading axes.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    if len(sa) > 2 and len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError("matmul", sa, sb)
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            if len(sa) == 2 and g.ndim > 2:
                # fold the batch axes into the contraction instead of summing afterwards
                gm = np.swapaxes(g, 0, -2).reshape(sa[0], -1)
                ga = gm @ np.swapaxes(bd, 0, -2).reshape(sa[1], -1).T
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if b.requires_grad:
            if len(sb) == 2 and g.ndim > 2:
                gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, grad_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    if a.data.ndim == 0:
        raise ShapeError("softmax_lastdim", a.shape)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax_lastdim", (a,), s, grad_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _record("exp", (a,), e, lambda g: (g * e,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log of nonpositive value (min {a.data.min():.3g})")
    x = a.data
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum of all elements (axis=None) or over the last axis (axis=-1)."""
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("sum", (a,), np.asarray(a.data.sum()),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    if axis not in (-1, len(shape) - 1) or not shape:
        raise ShapeError("sum", shape)
    return _record("sum", (a,), a.data.sum(axis=-1),
                   lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    """Mean of all elements (axis=None) or over the last axis (axis=-1)."""
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.data.size
        return _record("mean", (a,), np.asarray(a.data.mean()),
                       lambda g: (np.full(shape, g / n),))
    if axis not in (-1, len(shape) - 1) or not shape:
        raise ShapeError("mean", shape)
    n = shape[-1]
    return _record("mean", (a,), a.data.mean(axis=-1),
                   lambda g: (np.broadcast_to(g[..., None] / n, shape).copy(),))


def concat(*tensors) -> Tensor:
    """Concatenate along the last axis; leading axes must agree."""
    ts = [_as_tensor(t) for t in tensors]
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead or not t.shape:
            raise ShapeError("concat_lastdim", ts[0].shape, t.shape)
    widths = [t.shape[-1] for t in ts]
    cuts = np.cumsum(widths)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _record("concat_lastdim", tuple(ts),
                   np.concatenate([t.data for t in ts], axis=-1), grad_fn)


def dot(a, b) -> Tensor:
    """Inner product over the last axis of two equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or not a.shape:
        raise ShapeError("dot", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("dot", (a, b), (ad * bd).sum(axis=-1),
                   lambda g: (g[..., None] * bd, g[..., None] * ad))


def l2_distance(a, b) -> Tensor:
    """Euclidean distance over the last axis. Gradient at zero distance is 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or not a.shape:
        raise ShapeError("l2_distance", a.shape, b.shape)
    diff = a.data - b.data
    d = np.sqrt((diff * diff).sum(axis=-1))

    def grad_fn(g):
        safe = np.where(d > 0, d, 1.0)
        coef = np.where(d > 0, g / safe, 0.0)[..., None]
        return coef * diff, -coef * diff

    return _record("l2_distance", (a, b), d, grad_fn)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


_KINDS = {
    "add": add,
    "sub": sub,
    "mul_elementwise": mul,
    "matmul": matmul,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_lastdim": softmax,
    "exp": exp,
    "log": log,
    "mean": mean,
    "sum": sum,
    "concat_lastdim": concat,
    "dot": dot,
    "l2_distance": l2_distance,
    "scale": scale,
    "reshape": reshape,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# backward / optimisation


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape)
    tape = current_tape()
    if not loss.requires_grad or not tape.records:
        raise RuntimeError("backward called on a loss with no recorded graph")
    loss.grad = np.ones_like(loss.data)
    try:
        for rec in reversed(tape.records):
            g = rec.output.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi
        for rec in tape.records:
            if rec.output.grad is not None and not np.all(np.isfinite(rec.output.grad)):
                raise NonFiniteError(f"non-finite gradient flowing into {rec.kind}")
    finally:
        tape.clear()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """Plain SGD: ``p -= lr * p.grad``, then zero the gradient."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise RuntimeError(f"parameter {p.name or p.id} has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = np.zeros_like(p.data)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``; returns the prior norm."""
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(np.sum([np.sum(p.grad * p.grad) for p in params])))
    if norm > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / norm)
    return norm


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Relative error is ``|g - fd| / max(1, |fd|)`` per coordinate. Any
    non-finite value along the way is reported as ``inf``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    current_tape().clear()
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.requires_grad:
            backward(out)
            analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
        else:
            current_tape().clear()
            analytic = np.zeros_like(x.data)
        numeric = np.empty_like(x.data)
        flat = x.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = float(f(x).data)
                flat[i] = orig - epsilon
                lo = float(f(x).data)
                flat[i] = orig
                nflat[i] = (hi - lo) / (2.0 * epsilon)
    except (NonFiniteError, DomainError, FloatingPointError):
        current_tape().clear()
        return float("inf")
    finally:
        x.grad = None
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
