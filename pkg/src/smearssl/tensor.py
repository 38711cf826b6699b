"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array (float32 for training, float64 for
gradient checks -- the dtype travels with the data). Differentiable ops
record a backward closure on the active :class:`Tape`; ``Tape.backward``
replays the closures in exact reverse recording order, accumulating
gradients into every reachable tensor with ``requires_grad``.

Broadcasting is restricted to leading-axis expansion: two operands may mix
shapes only when one shape is a trailing suffix of the other (a scalar
counts as the empty suffix). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    """n-d float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def check_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager; ops executed inside record themselves when any
    input requires a gradient. ``backward`` replays the records strictly in
    reverse, so gradients for shared subexpressions accumulate by addition.
    """

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def __len__(self):
        return len(self._records)

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._records.append(backward_fn)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, root: Tensor) -> None:
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for fn in reversed(self._records):
            fn()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _suffix_broadcastable(a_shape, b_shape) -> bool:
    small, big = sorted((tuple(a_shape), tuple(b_shape)), key=len)
    return big[len(big) - len(small):] == small


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if not _suffix_broadcastable(a.shape, b.shape):
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} mix beyond leading-axis expansion"
        )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the leading axes added by broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _maybe_record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(backward_fn)
    return out


# --- arithmetic ---------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def backward():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad, b.shape))

    return _maybe_record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def backward():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(out.grad, b.shape))

    return _maybe_record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def backward():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(-out.grad)

    return _maybe_record(out, (a,), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def backward():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape))

    return _maybe_record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def backward():
        if out.grad is None:
            return
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _maybe_record(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-d x 2-d, stacked x stacked (identical
    leading dims), and stacked x 2-d (shared weight, gradient summed)."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul requires operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents disagree ({a.shape} x {b.shape})")
    if a.ndim != b.ndim and b.ndim != 2:
        raise DimensionError(f"matmul: unsupported rank mix ({a.shape} x {b.shape})")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims disagree ({a.shape} x {b.shape})")
    out = Tensor(a.data @ b.data)

    def backward():
        if out.grad is None:
            return
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == a.ndim:
                b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)
            else:
                k = a.shape[-1]
                n = g.shape[-1]
                a2 = a.data.reshape(-1, k)
                g2 = g.reshape(-1, n)
                b.accumulate_grad(a2.T @ g2)

    return _maybe_record(out, (a, b), backward)


# --- structural ops -----------------------------------------------------


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes).copy())
    inv = tuple(np.argsort(axes))

    def backward():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(np.transpose(out.grad, inv))

    return _maybe_record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape).copy())
    orig = a.shape

    def backward():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad.reshape(orig))

    return _maybe_record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        if out.grad is None:
            return
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(out.grad[tuple(idx)])

    return _maybe_record(out, tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def backward():
        if out.grad is not None and a.requires_grad:
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a.accumulate_grad(g)

    return _maybe_record(out, (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor by integer index (axis 0)."""
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(a.data[index].copy())

    def backward():
        if out.grad is not None and a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, index, out.grad)
            a.accumulate_grad(g)

    return _maybe_record(out, (a,), backward)


# --- reductions ---------------------------------------------------------


def _reduce_backward_shape(a: Tensor, axis, keepdims):
    if axis is None:
        return (1,) * a.ndim, a.shape
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    return kept, a.shape


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    kept, full = _reduce_backward_shape(a, axis, keepdims)

    def backward():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(np.broadcast_to(out.grad.reshape(kept), full).copy())

    return _maybe_record(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    kept, full = _reduce_backward_shape(a, axis, keepdims)
    count = a.data.size / max(out.data.size, 1)

    def backward():
        if out.grad is not None and a.requires_grad:
            g = np.broadcast_to(out.grad.reshape(kept), full) / count
            a.accumulate_grad(g.astype(a.dtype, copy=False))

    return _maybe_record(out, (a,), backward)


# --- elementwise nonlinearities -----------------------------------------


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def backward():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * out.data)

    return _maybe_record(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def backward():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad / a.data)

    return _maybe_record(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))

    def backward():
        if out.grad is not None and a.requires_grad:
            a.accumulate_grad(out.grad * 0.5 / out.data)

    return _maybe_record(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward():
        if out.grad is None or not a.requires_grad:
            return
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        a.accumulate_grad(out.grad * local.astype(a.dtype, copy=False))

    return _maybe_record(out, (a,), backward)


# --- normalizers --------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def backward():
        if out.grad is None or not a.requires_grad:
            return
        g = out.grad
        dot = (g * s).sum(axis=axis, keepdims=True)
        a.accumulate_grad((s * (g - dot)) / temperature)

    return _maybe_record(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    s = np.exp(out.data)

    def backward():
        if out.grad is None or not a.requires_grad:
            return
        g = out.grad
        a.accumulate_grad(g - s * g.sum(axis=axis, keepdims=True))

    return _maybe_record(out, (a,), backward)


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance,
    then apply the affine (gain, bias)."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layernorm affine shapes {gain.shape}/{bias.shape} do not match extent {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward():
        if out.grad is None:
            return
        g = out.grad
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(((gg - m1 - xhat * m2) * inv).astype(a.dtype, copy=False))

    return _maybe_record(out, (a, gain, bias), backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Divide each slice along ``axis`` by max(its L2 norm, eps)."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = a.data / denom
    out = Tensor(y)

    def backward():
        if out.grad is None or not a.requires_grad:
            return
        g = out.grad
        unclamped = norm > eps
        dot = (g * y).sum(axis=axis, keepdims=True)
        grad = np.where(unclamped, (g - y * dot) / denom, g / denom)
        a.accumulate_grad(grad.astype(a.dtype, copy=False))

    return _maybe_record(out, (a,), backward)
