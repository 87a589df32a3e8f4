"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous float ndarray (float32 by default, float64
allowed for high-precision checks).  While a ``GradTape`` is active, every
operation appends a tape entry ``(inputs, output, backward_fn)`` in forward
execution order, which is automatically topological.  ``backward(loss)``
replays the tape in reverse, visiting each entry exactly once, and
accumulates gradients into the ``grad`` field of every leaf tensor that
requires them.  Calling ``backward`` again without clearing grads adds to
the previously accumulated values.

Tensors are immutable after creation except for gradient accumulation, so
they can be shared freely; a tape itself is single-threaded.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericError, ShapeError
from . import macs

DEFAULT_DTYPE = np.float32

# When enabled every op output is checked for NaN/Inf (slow; used by tests
# and by the training loops around loss values).
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, where: str = "") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in tensor {where or repr(self.shape)}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# gradient tape


class GradTape:
    """Ordered record of executed operations for one reverse sweep."""

    def __init__(self):
        self._entries = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, inputs, output: Tensor, backward_fn) -> None:
        output.is_leaf = False
        output._tape = self
        self._entries.append((tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires-grad leaf."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        holders = {id(loss): loss}
        for inputs, output, backward_fn in reversed(self._entries):
            g_out = grads.pop(id(output), None)
            holders.pop(id(output), None)
            if g_out is None:
                continue
            in_grads = backward_fn(g_out)
            for t, g in zip(inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
                holders[id(t)] = t
        for tid, g in grads.items():
            t = holders[tid]
            if t.is_leaf and t.requires_grad:
                g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
                t.grad = g.copy() if t.grad is None else t.grad + g


_TAPE_STACK: list = []


class no_grad:
    """Context that suspends tape recording (forward-only evaluation)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def active_tape():
    if _TAPE_STACK and _TAPE_STACK[-1] is not None:
        return _TAPE_STACK[-1]
    return None


def backward(loss: Tensor) -> None:
    """Run the reverse sweep of the tape that produced ``loss``."""
    if loss._tape is None:
        raise ContractError("loss is not on a gradient tape")
    loss._tape.backward(loss)


def _make_output(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap op output, recording on the active tape when grads are needed."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("op produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_output(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_output(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_output(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_output(out, (a, b), bwd)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make_output(-x.data, (x,), lambda g: (-g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _make_output(out, (x,), bwd)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make_output(out, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _make_output(out, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _make_output(out, (x,), bwd)


def sqrt(x) -> Tensor:
    """Square root with subgradient 0 at exactly zero inputs."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def bwd(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make_output(out, (x,), bwd)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through inside [lo, hi], else 0."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def bwd(g):
        return (g * mask,)

    return _make_output(out, (x,), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to 1."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make_output(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def _restore_axes(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(x_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, x_shape)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis_t = tuple(axis) if isinstance(axis, (list, tuple)) else axis
    out = np.sum(x.data, axis=axis_t, keepdims=keepdims)

    def bwd(g):
        return (_restore_axes(g, x.shape, axis_t, keepdims).astype(x.dtype, copy=False),)

    return _make_output(np.asarray(out, dtype=x.dtype), (x,), bwd)


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axis_t = tuple(axis) if isinstance(axis, (list, tuple)) else axis
    out = np.mean(x.data, axis=axis_t, keepdims=keepdims)
    count = x.size if axis_t is None else int(
        np.prod([x.shape[a] for a in (axis_t if isinstance(axis_t, tuple) else (axis_t,))])
    )

    def bwd(g):
        return (_restore_axes(g, x.shape, axis_t, keepdims).astype(x.dtype, copy=False) / count,)

    return _make_output(np.asarray(out, dtype=x.dtype), (x,), bwd)


def _extreme(x, axis: int, keepdims: bool, use_max: bool) -> Tensor:
    x = as_tensor(x)
    fn = np.argmax if use_max else np.argmin
    idx = fn(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), g_exp, axis=axis)
        return (gx,)

    return _make_output(out, (x,), bwd)


def reduce_max(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; gradient routes to the first argmax on ties."""
    return _extreme(x, axis, keepdims, use_max=True)


def reduce_min(x, axis: int, keepdims: bool = False) -> Tensor:
    return _extreme(x, axis, keepdims, use_max=False)


# ---------------------------------------------------------------------------
# shape / indexing ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _make_output(out, (x,), bwd)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make_output(out, (x,), bwd)


def slice_(x, key) -> Tensor:
    """Basic (non-advanced) indexing with gradient scatter."""
    x = as_tensor(x)
    out = x.data[key]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make_output(np.ascontiguousarray(out), (x,), bwd)


def index_select(x, axis: int, idx) -> Tensor:
    """Gather along ``axis``; backward scatter-adds (handles repeats)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.take(x.data, idx, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        key = [slice(None)] * x.ndim
        key[axis] = idx
        np.add.at(gx, tuple(key), g)
        return (gx,)

    return _make_output(out, (x,), bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make_output(out, tuple(tensors), bwd)


def weighted_sum(weights, tensors) -> Tensor:
    """``sum_i weights[i] * tensors[i]`` for a 1-D weight vector.

    Fused so a mixed edge adds one tape entry instead of ~20.
    """
    w = as_tensor(weights)
    tensors = [as_tensor(t) for t in tensors]
    if w.ndim != 1 or len(tensors) != w.shape[0]:
        raise ShapeError(f"weighted_sum needs one weight per tensor, got {w.shape} for {len(tensors)}")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeError(f"weighted_sum operands disagree: {t.shape} vs {base}")
    out = np.zeros(base, dtype=np.result_type(w.data, tensors[0].data))
    for wi, t in zip(w.data, tensors):
        out += wi * t.data

    def bwd(g):
        gw = np.array([np.sum(g * t.data) for t in tensors], dtype=w.dtype)
        return (gw, *[g * wi for wi in w.data])

    return _make_output(out, (w, *tensors), bwd)


def matmul(a, b) -> Tensor:
    """2-D matrix product (counts MACs when instrumentation is active)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    if macs.counting_active():
        macs.add_macs(a.shape[0] * a.shape[1] * b.shape[1])

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make_output(out, (a, b), bwd)


def global_avg_pool(x) -> Tensor:
    """NCHW -> NC spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    return mean_(x, axis=(2, 3))
