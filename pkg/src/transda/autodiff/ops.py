"""Differentiable primitives.

Each function takes Tensors (or array-likes, promoted to constants) and
returns a Tensor whose backward closure yields one gradient per input.
"""

from __future__ import annotations

import functools
import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node, stop_gradient

__all__ = [
    "add", "sub", "mul", "div", "scalar_mul", "power", "matmul", "sum", "mean",
    "reshape", "transpose", "roll", "take", "concat", "exp", "log", "clamp_min",
    "sigmoid", "relu", "leaky_relu", "gelu", "softmax", "layernorm", "conv2d",
    "upsample_bilinear", "avg_pool2d", "window_partition", "window_merge",
    "stop_gradient",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return make_node("add", a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_node("sub", a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_node("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_node("div", out, (a, b), bw)


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_node("scalar_mul", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    ad = a.data
    if p == 2.0:
        return make_node("power", ad * ad, (a,), lambda g: (g * 2.0 * ad,))
    return make_node("power", ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0):
        from .tensor import NonFiniteError
        raise NonFiniteError("log")
    return make_node("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp_min(a, lo: float) -> Tensor:
    """max(a, lo); gradient passes only where a > lo."""
    a = as_tensor(a)
    ad = a.data
    keep = ad > lo
    return make_node("clamp_min", np.where(keep, ad, ad.dtype.type(lo)), (a,),
                     lambda g: (g * keep,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    return make_node("relu", a.data * keep, (a,), lambda g: (g * keep,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return make_node("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node("gelu", out, (a,), bw)


# -- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scalar_mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return make_node("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def roll(a, shift, axis) -> Tensor:
    a = as_tensor(a)
    if isinstance(shift, int):
        shift, axis = (shift,), (axis,)
    back = tuple(-s for s in shift)
    return make_node("roll", np.roll(a.data, shift, axis), (a,),
                     lambda g: (np.roll(g, back, axis),))


def take(table, index: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (along axis 0) at integer ``index``."""
    table = as_tensor(table)
    index = np.asarray(index)
    shape = table.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return make_node("take", table.data[index], (table,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node("concat", out, ts, bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_node("matmul", out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError("softmax", a.shape, detail=f"axis {axis} out of range")
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node("softmax", out, (a,), bw)


def layernorm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part; compose with mul/add)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_node("layernorm", xhat, (a,), bw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernels."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    s, p = int(stride), int(padding)
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    out = cols @ wmat.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias length")
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    xshape, wshape = x.shape, w.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(wshape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            assert gx.shape == xshape
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_node("conv2d", np.ascontiguousarray(out), parents, bw)


@functools.lru_cache(maxsize=64)
def _interp_matrix(n: int, factor: int, dtype: str) -> np.ndarray:
    """Rows map output positions to input positions (half-pixel centers, edge clamp)."""
    m = np.zeros((n * factor, n), dtype=np.float64)
    for i in range(n * factor):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def upsample_bilinear(a, factor: int) -> Tensor:
    """Bilinear upsampling of the last two axes by an integer factor."""
    a = as_tensor(a)
    if a.ndim < 2 or factor < 1:
        raise ShapeError("upsample_bilinear", a.shape, detail=f"factor {factor}")
    if factor == 1:
        return a
    H, W = a.shape[-2:]
    dt = a.data.dtype.name
    ah = _interp_matrix(H, int(factor), dt)
    aw = _interp_matrix(W, int(factor), dt)
    out = np.matmul(np.matmul(ah, a.data), aw.T)
    return make_node("upsample_bilinear", out, (a,),
                     lambda g: (np.matmul(np.matmul(ah.T, g), aw),))


def avg_pool2d(a, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling over the last two axes."""
    a = as_tensor(a)
    H, W = a.shape[-2:]
    if H % k or W % k:
        raise ShapeError("avg_pool2d", a.shape, detail=f"not divisible by {k}")
    if k == 1:
        return a
    lead = a.shape[:-2]
    r = reshape(a, lead + (H // k, k, W // k, k))
    return mean(r, axis=(len(lead) + 1, len(lead) + 3))


# -- windowing for local attention ---------------------------------------------

def window_partition(x, ws: int) -> Tensor:
    """(B, H, W, C) -> (B * nH * nW, ws*ws, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("window_partition", x.shape, detail="expected (B, H, W, C)")
    B, H, W, C = x.shape
    if H % ws or W % ws:
        raise ShapeError("window_partition", x.shape, detail=f"not divisible by window {ws}")
    r = reshape(x, (B, H // ws, ws, W // ws, ws, C))
    r = transpose(r, (0, 1, 3, 2, 4, 5))
    return reshape(r, (B * (H // ws) * (W // ws), ws * ws, C))


def window_merge(windows, ws: int, H: int, W: int) -> Tensor:
    """Inverse of window_partition."""
    windows = as_tensor(windows)
    nh, nw = H // ws, W // ws
    n, tokens, C = windows.shape
    if tokens != ws * ws or n % (nh * nw):
        raise ShapeError("window_merge", windows.shape, (H, W, ws))
    B = n // (nh * nw)
    r = reshape(windows, (B, nh, nw, ws, ws, C))
    r = transpose(r, (0, 1, 3, 2, 4, 5))
    return reshape(r, (B, H, W, C))
