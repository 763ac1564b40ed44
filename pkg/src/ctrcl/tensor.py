"""Minimal float64 tensor with define-by-run reverse-mode autodiff.

Every differentiable primitive is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` that maps the output gradient
to one gradient per input (``None`` for inputs that do not need one).
The graph is recorded implicitly through ``Tensor._ctx`` and linearised into
a :class:`Tape` when :func:`backward` is called.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-8  # probability clamp used inside every log / KL / CE


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False, _ctx: Optional["Function"] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar -------------------------------------------------
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
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce(self, "sum", axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce(self, "mean", axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape; never receives a gradient."""
    return Tensor(as_tensor(x).data, requires_grad=False)


_RECORDING = [True]


class no_grad:
    """Context manager that suspends graph recording (inference only)."""

    def __enter__(self):
        self.prev = _RECORDING[0]
        _RECORDING[0] = False

    def __exit__(self, *exc):
        _RECORDING[0] = self.prev


class Function:
    """Base class of every recorded operation."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        if _RECORDING[0] and any(t.requires_grad for t in tensors):
            return Tensor(out, requires_grad=True, _ctx=fn)
        return Tensor(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    for x, y in zip(reversed(a.shape), reversed(b.shape)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        return a * b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        if np.any(a <= 0):
            raise ValueError("log of a non-positive value; clamp the input first")
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0].data,)


class Sqrt(Function):
    def forward(self, a):
        if np.any(a < 0):
            raise ValueError("sqrt of a negative value")
        self.out = np.sqrt(a)
        return self.out

    def backward(self, g):
        return (g * 0.5 / self.out,)


class Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, g):
        return (g * self.mask,)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """tanh approximation of GELU."""

    def forward(self, a):
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a * a * a))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, g):
        a = self.inputs[0].data
        dt = (1.0 - self.t * self.t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + self.t) + 0.5 * a * dt),)


class ClampMin(Function):
    def forward(self, a, eps=EPS):
        self.keep = a >= eps
        return np.where(self.keep, a, eps)

    def backward(self, g):
        return (g * self.keep,)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return Sqrt.apply(a)


def relu(a) -> Tensor:
    return Relu.apply(a)


def gelu(a) -> Tensor:
    return Gelu.apply(a)


def clamp(a, eps: float = EPS) -> Tensor:
    """Lower clamp ``max(a, eps)``; gradient passes only where ``a >= eps``."""
    return ClampMin.apply(a, eps=eps)


def safe_log(a, eps: float = EPS) -> Tensor:
    return Log.apply(ClampMin.apply(a, eps=eps))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


class Reshape(Function):
    def forward(self, a, shape):
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.index = index
        return a[index]

    def backward(self, g):
        out = np.zeros(self.inputs[0].shape)
        idx = self.index if isinstance(self.index, tuple) else (self.index,)
        if all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in idx):
            out[self.index] += g  # basic indexing never repeats an element
        else:
            np.add.at(out, self.index, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = _norm_axis(axis, a.ndim)
        self.keepdims = keepdims
        return a.sum(axis=self.axis, keepdims=keepdims)

    def backward(self, g):
        shape = self.inputs[0].shape
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = _norm_axis(axis, a.ndim)
        self.keepdims = keepdims
        self.n = int(np.prod([a.shape[i] for i in self.axis])) if self.axis else 1
        return a.mean(axis=self.axis, keepdims=keepdims)

    def backward(self, g):
        shape = self.inputs[0].shape
        if not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / self.n, shape).copy(),)


def reduce(x, kind: str = "sum", axis=None, keepdims: bool = False) -> Tensor:
    if kind == "sum":
        return Sum.apply(x, axis=axis, keepdims=keepdims)
    if kind == "mean":
        return Mean.apply(x, axis=axis, keepdims=keepdims)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and neural primitives
# ---------------------------------------------------------------------------


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul dimension mismatch {a.shape} @ {b.shape}")
        if b.ndim == 2:
            # (..., k) @ (k, n) as one flat product
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[1])
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        ga = gb = None
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dimensions."""
    return MatMul.apply(a, b)


class Conv2d(Function):
    def forward(self, x, w, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d shape mismatch x={x.shape} w={w.shape}")
        kh, kw = w.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError("conv2d kernels must have odd size")
        if stride < 1 or pad < 0:
            raise ValueError("conv2d needs stride >= 1 and pad >= 0")
        n, c, h, wd = x.shape
        o = w.shape[0]
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (wd + 2 * pad - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d output would be empty")
        self.stride, self.pad, self.out_hw = stride, pad, (ho, wo)
        if kh == 1 and kw == 1 and stride == 1 and pad == 0:
            self.cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
            self.padded_shape = xp.shape
            win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
            win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
            # im2col: rows (n, i, j), columns (di, dj, c)
            self.cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(n * ho * wo, kh * kw * c)
        out = self.cols @ w.transpose(0, 2, 3, 1).reshape(o, -1).T
        return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, g):
        x, w = self.inputs
        o, c, kh, kw = w.shape
        n = x.shape[0]
        ho, wo = self.out_hw
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = None
        if w.requires_grad:
            gw = (gmat.T @ self.cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            gcols = gmat @ w.data.transpose(0, 2, 3, 1).reshape(o, -1)
            if kh == 1 and kw == 1 and self.stride == 1 and self.pad == 0:
                return gcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2), gw
            gcols = gcols.reshape(n, ho, wo, kh, kw, c)
            s, p = self.stride, self.pad
            pn, pc, ph, pw = self.padded_shape
            gxp = np.zeros((pn, ph, pw, pc))  # channels-last accumulation
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p : ph - p, p : pw - p, :] if p else gxp
            gx = gx.transpose(0, 3, 1, 2)
        return gx, gw


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of ``x[N,C,H,W]`` with ``w[O,C,kh,kw]``."""
    return Conv2d.apply(x, w, stride=stride, pad=pad)


class Softmax(Function):
    def forward(self, x, axis=-1, mask=None):
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"softmax axis {axis} out of range")
        self.axis = axis
        if mask is None:
            z = np.exp(x - x.max(axis=axis, keepdims=True))
        else:
            m = np.broadcast_to(mask, x.shape).astype(bool)
            top = np.where(m, x, -np.inf).max(axis=axis, keepdims=True)
            z = np.where(m, np.exp(np.where(m, x, top) - top), 0.0)
        self.out = z / z.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax. Slots where ``mask`` is False get exactly 0."""
    return Softmax.apply(x, axis=axis, mask=mask)


class Normalize(Function):
    """Zero-mean / unit-variance over ``axes`` (biased variance)."""

    def forward(self, x, axes, eps=1e-5):
        self.axes = axes
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.batch_mean, self.batch_var = mu, var
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv
        return self.xhat

    def backward(self, g):
        xh = self.xhat
        gm = g.mean(axis=self.axes, keepdims=True)
        gxm = (g * xh).mean(axis=self.axes, keepdims=True)
        return (self.inv * (g - gm - xh * gxm),)


def normalize(x, axes, eps: float = 1e-5) -> Tensor:
    return Normalize.apply(x, axes=tuple(axes), eps=eps)


def normalize_with_stats(x, axes, eps: float = 1e-5):
    """Like :func:`normalize`, also returning the flattened batch mean and biased variance."""
    x = as_tensor(x)
    fn = Normalize(x)
    out = fn.forward(x.data, axes=tuple(axes), eps=eps)
    y = Tensor(out, requires_grad=True, _ctx=fn) if x.requires_grad and _RECORDING[0] else Tensor(out)
    return y, fn.batch_mean.reshape(-1), fn.batch_var.reshape(-1)


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False: src = (i + 0.5) * n_in / n_out - 0.5, clamped at 0
    a = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = max((i + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        a[i, i1] += frac
    a.setflags(write=False)
    return a


def _resize_last2(x, ah, aw):
    # (..., h, w) -> (..., H, W) as ah @ x @ aw.T using flat 2-D products
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    y = x.reshape(-1, w) @ aw.T  # (..h), W
    y = y.reshape(-1, h, aw.shape[0]).transpose(0, 2, 1).reshape(-1, h) @ ah.T
    return y.reshape(-1, aw.shape[0], ah.shape[0]).transpose(0, 2, 1).reshape(*lead, ah.shape[0], aw.shape[0])


class BilinearUpsample(Function):
    def forward(self, x, out_h, out_w):
        h, w = x.shape[-2:]
        if out_h < h or out_w < w:
            raise ShapeError("bilinear_upsample only enlarges")
        self.ah = _interp_matrix(h, out_h)
        self.aw = _interp_matrix(w, out_w)
        return _resize_last2(x, self.ah, self.aw)

    def backward(self, g):
        return (_resize_last2(g, self.ah.T, self.aw.T),)


def bilinear_upsample(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of the last two axes (align_corners=False)."""
    return BilinearUpsample.apply(x, out_h=out_h, out_w=out_w)


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    # floor((i + 0.5) * n_in / n_out - 0.5) in exact integer arithmetic, clamped
    i = np.arange(n_out)
    idx = ((2 * i + 1) * n_in - n_out) // (2 * n_out)
    return np.clip(idx, 0, n_in - 1)


def nearest_resize(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    h, w = labels.shape[-2:]
    rows = nearest_indices(h, out_h)
    cols = nearest_indices(w, out_w)
    return labels[..., rows[:, None], cols[None, :]]


def nearest_downsample(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resampling of an integer label map (last two axes)."""
    h, w = np.shape(labels)[-2:]
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    if out_h > h or out_w > w:
        raise ValueError("nearest_downsample cannot enlarge")
    return nearest_resize(np.asarray(labels), out_h, out_w)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class Tape:
    """Recorded operations in topological order (inputs precede outputs)."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._ctx is not None:
                for p in t._ctx.inputs:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss._ctx is None or not loss.requires_grad:
        raise RuntimeError("backward needs a tensor produced by recorded operations")
    if loss.size != 1:
        raise ShapeError("backward needs a scalar loss")
    tape = Tape.from_root(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._ctx is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t._ctx.inputs, t._ctx.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-5,
    indices: Optional[Iterable[tuple]] = None,
) -> float:
    """Largest ``|g_ad - g_fd| / max(1, |g_fd|)`` over (selected) elements of x.

    ``g_fd`` is the central difference with step ``h``; ``indices`` restricts
    the comparison to a subset of elements for large inputs.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    backward(out)
    g_ad = probe.grad if probe.grad is not None else np.zeros_like(base)

    work = base.copy()
    idx_list = list(np.ndindex(base.shape)) if indices is None else list(indices)
    worst = 0.0
    for idx in idx_list:
        orig = work[idx]
        work[idx] = orig + h
        fp = f(Tensor(work.copy())).item()
        work[idx] = orig - h
        fm = f(Tensor(work.copy())).item()
        work[idx] = orig
        g_fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(g_ad[idx] - g_fd) / max(1.0, abs(g_fd)))
    return worst
