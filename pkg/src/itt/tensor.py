"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are contiguous row-major floats with at most four axes. Every
operation validates shapes, checks its output for non-finite values, and,
when a tape is active and an input requires gradients, records a backward
closure. ``backward`` replays the closures in exact reverse recording
order, accumulating gradients additively on every tensor along the way.

Precision is a per-run global: float32 for training, float64 when
verifying gradients (finite differences are meaningless in float32).
Broadcasting is deliberately narrow: scalar-times-tensor (``scale``),
per-row vector add/mul against the last axis, and per-row scalar mul
(``scale_rows``). Everything else must match exactly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "precision",
    "backward",
    "grad_check",
    "matmul",
    "transpose",
    "add",
    "mul",
    "scale",
    "scale_rows",
    "gather_rows",
    "scatter_rows",
    "embedding",
    "concat",
    "slice_axis",
    "reshape",
    "softmax",
    "rms_norm",
    "silu",
    "sigmoid",
    "tanh",
    "sum_all",
    "mean_all",
    "cross_entropy",
]

RMS_NORM_EPS = 1e-5
MAX_AXES = 4


class ShapeError(ValueError):
    """Operands do not satisfy an operation's shape rule."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf; never propagated silently."""


_DTYPE = np.float32


def set_default_dtype(name: str) -> None:
    """Set the per-run precision: 'float32' (training) or 'float64'."""
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValueError(f"unsupported dtype {name!r}; use 'float32' or 'float64'")
    _DTYPE = np.float32 if name == "float32" else np.float64


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision (used by verification code)."""
    global _DTYPE
    saved = _DTYPE
    set_default_dtype(name)
    try:
        yield
    finally:
        _DTYPE = saved


class Tensor:
    """A dense array plus an optional gradient slot.

    ``data`` is always contiguous row-major in the current global dtype.
    ``grad``, once populated by ``backward``, has identical shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=_DTYPE)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"tensor: at most {MAX_AXES} axes supported, got {arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A gradient-free view of the same values (data is shared, never mutated)."""
        return _result(self.data, False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{req})"

    def __add__(self, other):
        return add(self, other if isinstance(other, Tensor) else Tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data: np.ndarray, requires_grad: bool) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    return t


class Tape:
    """Ordered record of op nodes; backward replays it strictly in reverse.

    Use as a context manager; nesting masks the outer tape. A tape can be
    consumed by ``backward`` exactly once.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self


_TAPE_STACK: list[Tape | None] = []


@contextlib.contextmanager
def no_grad():
    """Suspend recording even if an outer tape is active."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.nodes.append((out, backward_fn))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # Copy so later in-place accumulation cannot alias an upstream buffer.
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every recorded tensor reachable from ``loss``.

    Gradients accumulate additively across multiple uses. The tape is
    consumed; running it twice without re-recording is an error.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("backward: tape already consumed; record a fresh tape")
    if not tape.nodes:
        raise RuntimeError("backward: tape is empty")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape.nodes):
        g = out.grad
        if g is not None:
            fn(g)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = _result(a.data @ b.data, a.requires_grad or b.requires_grad)
    _check_finite("matmul", out.data)

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    _record(out, _bw)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.shape}")
    out = _result(np.ascontiguousarray(a.data.T), a.requires_grad)

    def _bw(g: np.ndarray) -> None:
        _accum(a, np.ascontiguousarray(g.T))

    _record(out, _bw)
    return out


def _is_row_broadcast(a: Tensor, b: Tensor) -> bool:
    return b.data.ndim == 1 and a.data.ndim >= 2 and a.shape[-1] == b.shape[0]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a per-row vector as the second operand."""
    if a.shape == b.shape:
        row = False
    elif _is_row_broadcast(a, b):
        row = True
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")
    out = _result(a.data + b.data, a.requires_grad or b.requires_grad)
    _check_finite("add", out.data)

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g.reshape(-1, b.shape[0]).sum(axis=0) if row else g)

    _record(out, _bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply; also accepts a per-row vector as the second operand."""
    if a.shape == b.shape:
        row = False
    elif _is_row_broadcast(a, b):
        row = True
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")
    out = _result(a.data * b.data, a.requires_grad or b.requires_grad)
    _check_finite("mul", out.data)

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            gb = g * a.data
            _accum(b, gb.reshape(-1, b.shape[0]).sum(axis=0) if row else gb)

    _record(out, _bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _result(a.data * s, a.requires_grad)
    _check_finite("scale", out.data)

    def _bw(g: np.ndarray) -> None:
        _accum(a, g * s)

    _record(out, _bw)
    return out


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of a 2-D tensor by scalar s[i]."""
    if a.data.ndim != 2 or s.data.ndim != 1 or a.shape[0] != s.shape[0]:
        raise ShapeError(f"scale_rows: incompatible shapes {a.shape} by {s.shape}")
    out = _result(a.data * s.data[:, None], a.requires_grad or s.requires_grad)
    _check_finite("scale_rows", out.data)

    def _bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accum(a, g * s.data[:, None])
        if s.requires_grad:
            _accum(s, (g * a.data).sum(axis=1))

    _record(out, _bw)
    return out


def _as_index(idx, op: str, bound: int) -> np.ndarray:
    arr = np.asarray(idx, dtype=np.int64)
    if arr.ndim != 1:
        raise ShapeError(f"{op}: index must be 1-D, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= bound):
        raise IndexError(f"{op}: index out of range [0, {bound})")
    return arr


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows (2-D) or elements (1-D) by index; adjoint of scatter_rows."""
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"gather_rows: expected 1-D or 2-D, got shape {a.shape}")
    ix = _as_index(idx, "gather_rows", a.shape[0])
    out = _result(np.ascontiguousarray(a.data[ix]), a.requires_grad)

    def _bw(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        np.add.at(buf, ix, g)
        _accum(a, buf)

    _record(out, _bw)
    return out


def scatter_rows(a: Tensor, idx, n: int) -> Tensor:
    """Place rows/elements of ``a`` at ``idx`` in a zero tensor of leading size n.

    Duplicate indices accumulate, making this the exact adjoint of
    gather_rows.
    """
    if a.data.ndim not in (1, 2):
        raise ShapeError(f"scatter_rows: expected 1-D or 2-D, got shape {a.shape}")
    ix = _as_index(idx, "scatter_rows", n)
    if ix.shape[0] != a.shape[0]:
        raise ShapeError(
            f"scatter_rows: {a.shape[0]} rows but {ix.shape[0]} indices"
        )
    shape = (n,) + a.shape[1:]
    buf = np.zeros(shape, dtype=a.data.dtype)
    np.add.at(buf, ix, a.data)
    out = _result(buf, a.requires_grad)

    def _bw(g: np.ndarray) -> None:
        _accum(a, np.ascontiguousarray(g[ix]))

    _record(out, _bw)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Look up rows of an embedding table by token id."""
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got shape {table.shape}")
    ix = np.asarray(ids, dtype=np.int64)
    if ix.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {ix.shape}")
    if ix.size and (ix.min() < 0 or ix.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: token id out of range [0, {table.shape[0]})"
        )
    out = _result(np.ascontiguousarray(table.data[ix]), table.requires_grad)

    def _bw(g: np.ndarray) -> None:
        buf = np.zeros_like(table.data)
        np.add.at(buf, ix, g)
        _accum(table, buf)

    _record(out, _bw)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat: no tensors given")
    nd = parts[0].data.ndim
    if axis < 0 or axis >= nd:
        raise ShapeError(f"concat: axis {axis} invalid for {nd}-D tensors")
    for p in parts[1:]:
        if p.data.ndim != nd or any(
            i != axis and p.shape[i] != parts[0].shape[i] for i in range(nd)
        ):
            raise ShapeError(
                f"concat: shapes {[q.shape for q in parts]} differ off axis {axis}"
            )
    out = _result(
        np.concatenate([p.data for p in parts], axis=axis),
        any(p.requires_grad for p in parts),
    )

    def _bw(g: np.ndarray) -> None:
        off = 0
        sl = [slice(None)] * nd
        for p in parts:
            w = p.shape[axis]
            if p.requires_grad:
                sl[axis] = slice(off, off + w)
                _accum(p, np.ascontiguousarray(g[tuple(sl)]))
            off += w

    _record(out, _bw)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    nd = a.data.ndim
    if axis < 0 or axis >= nd:
        raise ShapeError(f"slice_axis: axis {axis} invalid for shape {a.shape}")
    if not (0 <= start < stop <= a.shape[axis]):
        raise ShapeError(
            f"slice_axis: range [{start}, {stop}) invalid for axis of size {a.shape[axis]}"
        )
    sl = [slice(None)] * nd
    sl[axis] = slice(start, stop)
    out = _result(np.ascontiguousarray(a.data[tuple(sl)]), a.requires_grad)

    def _bw(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        buf[tuple(sl)] = g
        _accum(a, buf)

    _record(out, _bw)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    if len(shape) > MAX_AXES:
        raise ShapeError(f"reshape: at most {MAX_AXES} axes supported")
    out = _result(a.data.reshape(shape), a.requires_grad)

    def _bw(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.shape))

    _record(out, _bw)
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, with max-subtraction for stability."""
    if a.data.ndim < 1:
        raise ShapeError("softmax: scalar input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = _result(e / e.sum(axis=-1, keepdims=True), a.requires_grad)
    _check_finite("softmax", out.data)

    def _bw(g: np.ndarray) -> None:
        y = out.data
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    _record(out, _bw)
    return out


def rms_norm(a: Tensor, weight: Tensor, eps: float = RMS_NORM_EPS) -> Tensor:
    """Root-mean-square normalization over the last axis with a learned gain."""
    if a.data.ndim != 2 or weight.data.ndim != 1 or a.shape[1] != weight.shape[0]:
        raise ShapeError(f"rms_norm: incompatible shapes {a.shape}, {weight.shape}")
    d = a.shape[1]
    inv = 1.0 / np.sqrt((a.data * a.data).mean(axis=1, keepdims=True) + eps)
    out = _result(a.data * inv * weight.data[None, :], a.requires_grad or weight.requires_grad)
    _check_finite("rms_norm", out.data)

    def _bw(g: np.ndarray) -> None:
        if weight.requires_grad:
            _accum(weight, (g * a.data * inv).sum(axis=0))
        if a.requires_grad:
            t = g * weight.data[None, :]
            # d(1/rms)/dx pulls in a -x/(d*rms^3) term per row.
            _accum(a, inv * t - (inv ** 3) * a.data * (t * a.data).sum(axis=1, keepdims=True) / d)

    _record(out, _bw)
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    out = _result(s, a.requires_grad)

    def _bw(g: np.ndarray) -> None:
        _accum(a, g * s * (1.0 - s))

    _record(out, _bw)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _result(y, a.requires_grad)

    def _bw(g: np.ndarray) -> None:
        _accum(a, g * (1.0 - y * y))

    _record(out, _bw)
    return out


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _stable_sigmoid(a.data)
    out = _result(a.data * s, a.requires_grad)
    _check_finite("silu", out.data)

    def _bw(g: np.ndarray) -> None:
        _accum(a, g * s * (1.0 + a.data * (1.0 - s)))

    _record(out, _bw)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _result(a.data.sum(dtype=a.data.dtype).reshape(()), a.requires_grad)
    _check_finite("sum_all", out.data)

    def _bw(g: np.ndarray) -> None:
        _accum(a, np.full(a.shape, g, dtype=a.data.dtype))

    _record(out, _bw)
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _result((a.data.sum(dtype=a.data.dtype) / n).reshape(()), a.requires_grad)
    _check_finite("mean_all", out.data)

    def _bw(g: np.ndarray) -> None:
        _accum(a, np.full(a.shape, g / n, dtype=a.data.dtype))

    _record(out, _bw)
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token cross-entropy via logsumexp; backward is softmax minus one-hot."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    ix = np.asarray(targets, dtype=np.int64)
    if ix.ndim != 1 or ix.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: {logits.shape[0]} rows but targets shape {ix.shape}"
        )
    if ix.size and (ix.min() < 0 or ix.max() >= logits.shape[1]):
        raise IndexError(f"cross_entropy: target out of range [0, {logits.shape[1]})")
    n = logits.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    se = np.exp(z).sum(axis=1, keepdims=True)
    losses = np.log(se)[:, 0] - z[np.arange(n), ix]
    out = _result((losses.sum(dtype=logits.data.dtype) / n).reshape(()), logits.requires_grad)
    _check_finite("cross_entropy", out.data)

    def _bw(g: np.ndarray) -> None:
        p = np.exp(z) / se
        p[np.arange(n), ix] -= 1.0
        _accum(logits, (g / n) * p)

    _record(out, _bw)
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
) -> list[float]:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps the given tensors to a scalar. Returns, per input, the
    maximum of |analytic - numeric| / max(1, |numeric|) over its elements.
    ``fn`` must be deterministic; this is probed by evaluating it twice.
    Meant to run in float64 mode.
    """
    with no_grad():
        probe_a = fn(inputs).item()
        probe_b = fn(inputs).item()
    if probe_a != probe_b:
        raise RuntimeError("grad_check: fn is not deterministic across evaluations")

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = fn(inputs)
    if loss.data.size != 1:
        raise ShapeError("grad_check: fn must return a scalar")
    backward(tape, loss)

    errors: list[float] = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = fn(inputs).item()
                flat[i] = orig - eps
                f_minus = fn(inputs).item()
                flat[i] = orig
                num_flat[i] = (f_plus - f_minus) / (2.0 * eps)
        denom = np.maximum(1.0, np.abs(numeric))
        errors.append(float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0)
    return errors


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
