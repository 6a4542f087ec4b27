"""Tape-based reverse-mode autodiff over dense NumPy arrays.

Just enough machinery for a small decoder-only transformer: tensors are
NumPy arrays with an optional gradient slot; ops executed under an active
:class:`Tape` append an operation record (kind, input node ids, output node
id, backward closure over saved activations). :func:`backward` replays the
records once, in reverse order, and accumulates gradients on leaf tensors.

A tape is single-threaded; distinct tapes (distinct queries) may run in
parallel because the active-tape stack is thread-local and parameters are
only read during the forward pass.
"""

import itertools
import threading

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DegenerateRowError, DimensionError

_ids = itertools.count()
_local = threading.local()

FLOAT_DTYPES = (np.float32, np.float64)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class OpRecord:
    """One step of a recorded computation.

    ``backward`` is a closure over whatever forward activations the
    gradient rule needs; called with the output gradient it returns one
    gradient array (or None) per input.
    """

    __slots__ = ("kind", "inputs", "output_id", "backward")

    def __init__(self, kind, inputs, output_id, backward):
        self.kind = kind
        self.inputs = inputs
        self.output_id = output_id
        self.backward = backward


class Tape:
    """Ordered op records; inputs of record k are outputs of records < k or leaves."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class Tensor:
    """Dense array with an optional same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_produced")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self._produced = False  # True once some OpRecord outputs this tensor

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._produced

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

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

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def max(self, axis=None):
        return max_(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(kind, inputs, out_data, backward) -> Tensor:
    """Wrap a forward result; record the op if a tape is active and any
    input participates in a gradient computation."""
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._produced = True
        tape.records.append(OpRecord(kind, tuple(inputs), out.node_id, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach grad's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data
    out = ad * bd

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", (a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _emit("neg", (a,), -a.data, bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _emit("exp", (a,), out, bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _emit("log", (a,), np.log(ad), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x), the gate nonlinearity of the FFN."""
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s

    def bwd(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _emit("silu", (a,), out, bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow for large |x|."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        return (g * _sigmoid(x),)

    return _emit("softplus", (a,), out, bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return _emit("reshape", (a,), out, bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def bwd(g):
        return (g.transpose(inv),)

    return _emit("transpose", (a,), out, bwd)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", (a,), out, bwd)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape).copy(),)

    return _emit("mean", (a,), out, bwd)


def max_(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.max(axis=axis)

    def bwd(g):
        if axis is None:
            hit = (a.data == out).astype(a.data.dtype)
            return (hit * (g / hit.sum()),)
        expanded = np.expand_dims(out, axis)
        hit = (a.data == expanded).astype(a.data.dtype)
        counts = hit.sum(axis=axis, keepdims=True)
        return (hit * (np.expand_dims(g, axis) / counts),)

    return _emit("max", (a,), out, bwd)


# ---------------------------------------------------------------------------
# matmul / indexing
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of 2-D operands or stacked 3-D operands with equal
    leading extent. Gradients: da = g @ b^T, db = a^T @ g."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim != ad.ndim:
        raise DimensionError(f"matmul expects matching 2-D or 3-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = np.matmul(ad, bd)

    def bwd(g):
        da = np.matmul(g, bd.swapaxes(-1, -2))
        db = np.matmul(ad.swapaxes(-1, -2), g)
        return da, db

    return _emit("matmul", (a, b), out, bwd)


def gather(a, idx) -> Tensor:
    """Rows of a selected by a 1-D integer index (embedding lookup)."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather index must be 1-D, got shape {idx.shape}")
    out = a.data[idx]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _emit("gather", (a,), out, bwd)


def select(a, rows, cols) -> Tensor:
    """Elements a[rows[i], cols[i]] as a vector; scatter-add on backward."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise DimensionError("select expects matching 1-D row/col indices")
    out = a.data[rows, cols]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, (rows, cols), g)
        return (da,)

    return _emit("select", (a,), out, bwd)


# ---------------------------------------------------------------------------
# kernel-backed ops
# ---------------------------------------------------------------------------


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis of a 2-D tensor."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"log_softmax expects 2-D input, got {a.data.shape}")
    y = kernels.log_softmax_fwd(np.ascontiguousarray(a.data))

    def bwd(g):
        return (kernels.log_softmax_bwd(y, np.ascontiguousarray(g)),)

    return _emit("log_softmax", (a,), y, bwd)


def masked_softmax(logits, mask: np.ndarray) -> Tensor:
    """Softmax over permitted keys of logits [h, q, k] under mask [q, k].

    Forbidden keys get exactly 0 weight; stabilization subtracts the max
    over permitted keys only. A row with no permitted key raises
    DegenerateRowError rather than yielding NaN.
    """
    logits = _as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if logits.data.ndim != 3:
        raise DimensionError(f"masked_softmax expects [h, q, k] logits, got {logits.data.shape}")
    if mask.shape != logits.data.shape[1:]:
        raise DimensionError(f"mask shape {mask.shape} does not match logits {logits.data.shape}")
    row_ok = mask.any(axis=1)
    if not row_ok.all():
        bad = int(np.flatnonzero(~row_ok)[0])
        raise DegenerateRowError(f"attention row {bad} has no permitted key")
    probs = kernels.masked_softmax_fwd(np.ascontiguousarray(logits.data), mask)

    def bwd(g):
        return (kernels.masked_softmax_bwd(probs, np.ascontiguousarray(g)),)

    return _emit("masked_softmax", (logits,), probs, bwd)


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization of rows of x [s, d], scaled by gain [d]."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, like=x)
    if x.data.ndim != 2 or gain.data.shape != (x.data.shape[1],):
        raise DimensionError(f"rms_norm expects x [s, d] and gain [d], got {x.data.shape}, {gain.data.shape}")
    y, inv_rms = kernels.rms_norm_fwd(np.ascontiguousarray(x.data), gain.data, eps)

    def bwd(g):
        dx, dgain = kernels.rms_norm_bwd(np.ascontiguousarray(g), x.data, gain.data, inv_rms)
        return dx, dgain

    return _emit("rms_norm", (x, gain), y, bwd)


def rope(x, positions, base: float = 10000.0) -> Tensor:
    """Rotary rotation of x [h, s, head_dim] by per-token integer positions.

    Coordinate pair (2j, 2j+1) at position m is rotated by m * base^(-2j/d);
    the rotation is orthonormal, so each pair keeps its norm and the
    backward pass rotates gradients by the negated angle.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"rope expects [h, s, head_dim] input, got {x.data.shape}")
    head_dim = x.data.shape[2]
    if head_dim % 2 != 0:
        raise ConfigError(f"rope requires an even head dimension, got {head_dim}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (x.data.shape[1],):
        raise DimensionError(f"positions shape {positions.shape} does not match seq length {x.data.shape[1]}")
    if (positions < 0).any():
        raise ContractError("rope positions must be non-negative")
    inv_freq = base ** (-2.0 * np.arange(head_dim // 2, dtype=np.float64) / head_dim)

    out = kernels.rope_fwd(np.ascontiguousarray(x.data), positions, inv_freq)

    def bwd(g):
        return (kernels.rope_bwd(np.ascontiguousarray(g), positions, inv_freq),)

    return _emit("rope", (x,), out, bwd)


# ---------------------------------------------------------------------------
# backward / gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every leaf reachable from loss.

    Walks the recording tape once in reverse op order. Repeated calls
    accumulate into the same .grad buffers.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = current_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output_id, None)
        if g is None:
            continue
        input_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            else:
                acc = grads.get(t.node_id)
                if acc is None:
                    # Copy: gi may alias g or a sibling input's gradient, and
                    # this buffer is accumulated into in place later.
                    grads[t.node_id] = np.array(gi)
                else:
                    acc += gi


def grad_check(f, params, epsilon: float = 1e-5, samples: int = 100, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    f: nullary function returning a scalar Tensor, deterministic in params.
    Coordinates are sampled uniformly across all parameter entries; the
    relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape():
        loss = f()
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("objective is not finite")
        backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    n = min(samples, total)
    coords = rng.choice(total, size=n, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for c in coords:
        pi = int(np.searchsorted(offsets, c, side="right") - 1)
        j = int(c - offsets[pi])
        flat = params[pi].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        f_plus = f().item()
        flat[j] = orig - epsilon
        f_minus = f().item()
        flat[j] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError("objective is not finite under perturbation")
        numeric = (f_plus - f_minus) / (2.0 * epsilon)
        a = float(analytic[pi].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
