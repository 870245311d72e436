"""Dense tensors with tape-based reverse-mode differentiation.

The op set is deliberately closed: exactly the primitives the rest of the
package needs, each with a hand-derived backward rule. Gradients are only
recorded while a Tape is active, so frozen forward passes cost nothing.

Reductions use numpy's fixed-order summation, so forward results are
bitwise reproducible for a fixed seed and thread configuration.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable ops.

    Single-owner: open with `with Tape() as tape:`, run the forward pass,
    then call `tape.backward(loss)` once. Backward visits ops in exact
    reverse execution order; a value used twice receives summed gradients.
    """

    __slots__ = ("_entries", "_consumed")

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        if _TAPE_STACK and _TAPE_STACK[-1] is self:
            _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: "Tensor") -> None:
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}"
            )
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any requires_grad tensor")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, back in reversed(self._entries):
            if out.grad is not None:
                back(out.grad)


def _tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: "Tensor") -> None:
    """Consume the innermost active tape, populating grads of all leaves."""
    t = _tape()
    if t is None:
        raise ContractError("backward() called with no active tape")
    t.backward(loss)


class Tensor:
    """Dense real array, optionally participating in the gradient tape.

    Immutable by convention after construction; the only sanctioned
    in-place writes are the optimizer's parameter updates.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce scalar operands to the tensor operand's dtype."""
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    return Tensor(np.asarray(a, dtype=b.dtype)), b


def _result(data: np.ndarray, inputs: Sequence[Tensor], back) -> Tensor:
    """Wrap an op result, recording its backward on the active tape."""
    tape = _tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    if needs:
        tape._entries.append((out, back(out)))
    return out


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g into t.grad. own=True means g is a fresh array the caller
    relinquishes, safe to adopt without a defensive copy."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if own and g.dtype == t.data.dtype and g.flags.owndata:
            t.grad = g
        else:
            t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(out):
        def fn(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(g, b.shape))
        return fn

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(out):
        def fn(g):
            _accum(a, _unbroadcast(g, a.shape))
            _accum(b, _unbroadcast(-g, b.shape))
        return fn

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.shape))
        return fn

    return _result(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return fn

    return _result(a.data / b.data, (a, b), back)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(out):
        def fn(g):
            _accum(x, g * c, own=True)
        return fn

    return _result(x.data * x.dtype.type(c), (x,), back)


def square(x: Tensor) -> Tensor:
    def back(out):
        def fn(g):
            _accum(x, g * (2.0 * x.data), own=True)
        return fn

    return _result(x.data * x.data, (x,), back)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-form GELU."""
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(x.data * inv_sqrt2))

    def back(out):
        def fn(g):
            pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
            _accum(x, g * (cdf + x.data * pdf), own=True)
        return fn

    return _result((x.data * cdf).astype(x.dtype), (x,), back)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)

    def back(out):
        def fn(g):
            _accum(x, g.reshape(x.shape))
        return fn

    return _result(x.data.reshape(shape), (x,), back)


def transpose(x: Tensor, axes=None) -> Tensor:
    def back(out):
        def fn(g):
            inv = None if axes is None else np.argsort(axes)
            _accum(x, g.transpose(inv))
        return fn

    return _result(x.data.transpose(axes), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(out):
        def fn(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])
        return fn

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds (duplicate ids sum)."""
    ids = np.asarray(ids, dtype=np.int64)

    def back(out):
        def fn(g):
            if table.requires_grad:
                gt = np.zeros_like(table.data)
                np.add.at(gt, ids, g)
                _accum(table, gt, own=True)
        return fn

    return _result(table.data[ids], (table,), back)


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(out):
        def fn(g):
            if axis is None:
                _accum(x, np.broadcast_to(g, x.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accum(x, np.broadcast_to(ge, x.shape).copy())
        return fn

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else (
        np.prod([x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    )
    inv = 1.0 / float(n)

    def back(out):
        def fn(g):
            if axis is None:
                _accum(x, np.broadcast_to(g * inv, x.shape).copy())
            else:
                ge = g if keepdims else np.expand_dims(g, axis)
                _accum(x, np.broadcast_to(ge * inv, x.shape).copy())
        return fn

    return _result(x.data.mean(axis=axis, keepdims=keepdims), (x,), back)


def masked_sum(x: Tensor, mask) -> Tensor:
    """Sum of x over a constant 0/1 mask (same shape), as a scalar."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = m.astype(x.dtype, copy=False)
    if m.shape != x.shape:
        raise ShapeError(f"masked_sum mask shape {m.shape} != tensor shape {x.shape}")

    def back(out):
        def fn(g):
            _accum(x, g * m, own=True)
        return fn

    return _result((x.data * m).sum(), (x,), back)


# ---------------------------------------------------------------------------
# linear algebra / attention


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast (numpy matmul semantics)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims mismatch: {a.shape} vs {b.shape}")

    def back(out):
        def fn(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape), own=True)
            if b.requires_grad:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape), own=True)
        return fn

    return _result(a.data @ b.data, (a, b), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(out):
        def fn(g):
            dot = (g * out.data).sum(axis=-1, keepdims=True)
            _accum(x, (g - dot) * out.data, own=True)
        return fn

    return _result(y, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine (gain, bias)."""
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(out):
        def fn(g):
            if gain.requires_grad:
                _accum(gain, _unbroadcast(g * xhat, gain.shape))
            if bias.requires_grad:
                _accum(bias, _unbroadcast(g, bias.shape))
            if x.requires_grad:
                dxhat = g * gain.data
                s1 = dxhat.sum(axis=-1, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
                _accum(x, (inv / n) * (n * dxhat - s1 - xhat * s2), own=True)
        return fn

    return _result(xhat * gain.data + bias.data, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# spatial ops (NHWC)


def im2col(x: Tensor, ksize: int, pad: int | None = None) -> Tensor:
    """Unfold k*k stride-1 patches: [B,H,W,C] -> [B, H*W, k*k*C].

    Zero padding keeps the spatial extent; backward scatter-adds the
    patch gradients back in a fixed order.
    """
    if x.ndim != 4:
        raise ShapeError(f"im2col needs [B,H,W,C], got {x.shape}")
    p = ksize // 2 if pad is None else pad
    b, h, w, c = x.shape
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, h * w, ksize * ksize * c), dtype=x.dtype)
    for i in range(ksize):
        for j in range(ksize):
            patch = xp[:, i:i + h, j:j + w, :].reshape(b, h * w, c)
            cols[:, :, (i * ksize + j) * c:(i * ksize + j + 1) * c] = patch

    def back(out):
        def fn(g):
            if not x.requires_grad:
                return
            gp = np.zeros_like(xp)
            for i in range(ksize):
                for j in range(ksize):
                    blk = g[:, :, (i * ksize + j) * c:(i * ksize + j + 1) * c]
                    gp[:, i:i + h, j:j + w, :] += blk.reshape(b, h, w, c)
            _accum(x, np.ascontiguousarray(gp[:, p:p + h, p:p + w, :]), own=True)
        return fn

    return _result(cols, (x,), back)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2, on [B,H,W,C]."""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    y = x.data.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def back(out):
        def fn(g):
            gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
            _accum(x, gx.astype(x.dtype), own=True)
        return fn

    return _result(y, (x,), back)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on [B,H,W,C]."""
    y = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def back(out):
        def fn(g):
            b, h2, w2, c = g.shape
            gs = g.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
            _accum(x, gs, own=True)
        return fn

    return _result(y, (x,), back)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    Independent of the tape: f is evaluated on plain perturbed copies.
    Use double precision inputs for meaningful comparisons.
    """
    base = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if h <= 0:
        raise ContractError("finite_diff_grad needs h > 0")
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    xb = base.copy()
    for i in range(base.size):
        orig = xb.reshape(-1)[i]
        xb.reshape(-1)[i] = orig + h
        fp = _scalar(f(Tensor(xb.copy())))
        xb.reshape(-1)[i] = orig - h
        fm = _scalar(f(Tensor(xb.copy())))
        xb.reshape(-1)[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data.reshape(()))
    return float(v)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1e-12, |a|+|b|) over all elements."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-12)
    return float(np.max(np.abs(a - b) / denom))


def rel_error_norm(a: np.ndarray, b: np.ndarray) -> float:
    """||a-b|| / max(||a||, ||b||, 1e-12); robust when many entries are ~0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
