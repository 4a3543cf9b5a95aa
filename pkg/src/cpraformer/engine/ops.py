"""Differentiable operations over 4D tensors.

Convolutions go through an im2col + BLAS matmul path; each op validates
shapes up front, computes the forward value with plain numpy, and registers
a vector-Jacobian closure on the tape when any operand is taped.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, check_same_dtype, record

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", out, [a, b], vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", out, [a, b], vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return record("mul", out, [a, b], vjp)


def neg(a: Tensor) -> Tensor:
    return record("neg", -a.data, [a], lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = a.dtype.type(factor)
    return record("scale", a.data * factor, [a], lambda g: (g * factor,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return record("abs", np.abs(a.data), [a], lambda g: (g * sign,))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean_all(a: Tensor) -> Tensor:
    size = a.data.size
    out = np.full((1, 1, 1, 1), a.data.mean(), dtype=a.dtype)

    def vjp(g):
        return (np.broadcast_to(g / size, a.shape),)

    return record("mean_all", out, [a], vjp)


def sum_all(a: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), a.data.sum(), dtype=a.dtype)

    def vjp(g):
        return (np.broadcast_to(g, a.shape),)

    return record("sum_all", out, [a], vjp)


def mean_over(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Mean over the given axes, keeping dims."""
    axes = tuple(ax % 4 for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / count, a.shape),)

    return record("mean_over", out, [a], vjp)


def gap(a: Tensor) -> Tensor:
    """Global average pooling over the spatial axes -> (N,C,1,1)."""
    n, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3), keepdims=True)

    def vjp(g):
        return (np.broadcast_to(g / (h * w), a.shape),)

    return record("gap", out, [a], vjp)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", a.data * mask, [a], lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return record("sigmoid", s, [a], lambda g: (g * s * (1.0 - s),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return record("gelu", out.astype(a.dtype, copy=False), [a], vjp)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = axis % 4
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, [a], vjp)


def masked_softmax(a: Tensor, keep: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over positions where `keep` is True; others are exactly zero.

    Equivalent to setting masked logits to -inf before a plain softmax, but
    never materializes non-finite values.  Every slice along `axis` must keep
    at least one position.
    """
    axis = axis % 4
    if keep.shape != a.shape:
        raise ShapeError(f"masked_softmax: mask shape {keep.shape} != input {a.shape}")
    keep = keep.astype(bool)
    if not keep.any(axis=axis).all():
        raise ShapeError("masked_softmax: some rows mask out every position")
    neg = np.array(-np.inf, dtype=a.dtype)
    shifted = np.where(keep, a.data, neg)
    m = shifted.max(axis=axis, keepdims=True)
    e = np.exp(np.where(keep, a.data - m, neg))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("masked_softmax", y, [a], vjp)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    check_same_dtype("concat", *tensors)
    axis = axis % 4
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * 4
        cots = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            cots.append(g[tuple(sl)])
        return cots

    return record("concat", out, tensors, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = axis % 4
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}] out of range for "
                         f"axis {axis} of {a.shape}")
    sl = [slice(None)] * 4
    sl[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def vjp(g):
        dx = np.zeros(a.shape, dtype=a.dtype)
        dx[tuple(sl)] = g
        return (dx,)

    return record("narrow", out, [a], vjp)


def split_half(a: Tensor, axis: int = 1) -> tuple[Tensor, Tensor]:
    axis = axis % 4
    size = a.shape[axis]
    if size % 2 != 0:
        raise ShapeError(f"split_half: axis {axis} of {a.shape} has odd size {size}")
    half = size // 2
    return narrow(a, axis, 0, half), narrow(a, axis, half, half)


def split_channels(a: Tensor, parts: int) -> list[Tensor]:
    c = a.shape[1]
    if c % parts != 0:
        raise ShapeError(f"split_channels: {c} channels not divisible by {parts}")
    step = c // parts
    return [narrow(a, 1, i * step, step) for i in range(parts)]


def reshape4(a: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape4: cannot view {a.shape} as {shape}")
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return record("reshape4", out, [a], vjp)


def transpose_last2(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.swapaxes(2, 3))

    def vjp(g):
        return (np.ascontiguousarray(g.swapaxes(2, 3)),)

    return record("transpose_last2", out, [a], vjp)


def split_heads(a: Tensor, heads: int) -> Tensor:
    """(N,C,H,W) -> (N,heads,C/heads,H*W); channel c maps to head c // (C/heads)."""
    n, c, h, w = a.shape
    if c % heads != 0:
        raise ShapeError(f"split_heads: {c} channels not divisible by {heads} heads")
    out = a.data.reshape(n, heads, c // heads, h * w)

    def vjp(g):
        return (g.reshape(a.shape),)

    return record("split_heads", out, [a], vjp)


def merge_heads(a: Tensor, h: int, w: int) -> Tensor:
    """(N,heads,C_h,H*W) -> (N,heads*C_h,H,W); inverse of split_heads."""
    n, heads, ch, hw = a.shape
    if hw != h * w:
        raise ShapeError(f"merge_heads: last axis {hw} != {h}*{w}")
    out = a.data.reshape(n, heads * ch, h, w)

    def vjp(g):
        return (g.reshape(a.shape),)

    return record("merge_heads", out, [a], vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    check_same_dtype("matmul", a, b)
    if a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def vjp(g):
        da = _unbroadcast(np.matmul(g, bd.swapaxes(2, 3)), a.shape)
        db = _unbroadcast(np.matmul(ad.swapaxes(2, 3), g), b.shape)
        return da, db

    return record("matmul", out, [a, b], vjp)


# ---------------------------------------------------------------------------
# pixel shuffle / unshuffle
# ---------------------------------------------------------------------------

def _unshuffle_data(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // r, r, w // r, r)
    return np.ascontiguousarray(y.transpose(0, 1, 3, 5, 2, 4)).reshape(
        n, c * r * r, h // r, w // r)


def _shuffle_data(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    y = x.reshape(n, c // (r * r), r, r, h, w)
    return np.ascontiguousarray(y.transpose(0, 1, 4, 2, 5, 3)).reshape(
        n, c // (r * r), h * r, w * r)


def pixel_unshuffle(a: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = a.shape
    if h % r != 0 or w % r != 0:
        raise ShapeError(f"pixel_unshuffle: spatial dims of {a.shape} not divisible by {r}")
    out = _unshuffle_data(a.data, r)

    def vjp(g):
        return (_shuffle_data(g, r),)

    return record("pixel_unshuffle", out, [a], vjp)


def pixel_shuffle(a: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = a.shape
    if c % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    out = _shuffle_data(a.data, r)

    def vjp(g):
        return (_unshuffle_data(g, r),)

    return record("pixel_shuffle", out, [a], vjp)


# ---------------------------------------------------------------------------
# channel-axis linear map (shared by linear and 1x1 conv)
# ---------------------------------------------------------------------------

def _channel_map(xd: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(
        np.tensordot(wmat, xd, axes=(1, 1)).transpose(1, 0, 2, 3))


def _channel_map_vjp(g, xd, wmat):
    dx = np.ascontiguousarray(np.tensordot(wmat.T, g, axes=(1, 1)).transpose(1, 0, 2, 3))
    dw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))
    return dx, dw


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Channel-axis affine map applied at every (n,h,w) site; w is (Cout,Cin,1,1)."""
    operands = [x, w] + ([b] if b is not None else [])
    check_same_dtype("linear", *operands)
    cout, cin = w.shape[0], w.shape[1]
    if w.shape[2] != 1 or w.shape[3] != 1:
        raise ShapeError(f"linear: weight must be (Cout,Cin,1,1), got {w.shape}")
    if x.shape[1] != cin:
        raise ShapeError(f"linear: input has {x.shape[1]} channels but weight "
                         f"expects {cin} (input {x.shape}, weight {w.shape})")
    if b is not None and b.shape != (cout, 1, 1, 1):
        raise ShapeError(f"linear: bias shape {b.shape} != ({cout},1,1,1)")
    xd = x.data
    wmat = w.data.reshape(cout, cin)
    out = _channel_map(xd, wmat)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def vjp(g):
        dx, dw = _channel_map_vjp(g, xd, wmat)
        cots = [dx, dw.reshape(w.shape)]
        if b is not None:
            cots.append(g.sum(axis=(0, 2, 3)).reshape(cout, 1, 1, 1))
        return cots

    return record("linear", out, operands, vjp)


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_checks(op, x, w, b, stride, padding, depthwise=False):
    cout, cin_w, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"{op}: kernel must be square, got {w.shape}")
    if kh % 2 == 0:
        raise ShapeError(f"{op}: kernel size {kh} must be odd")
    if stride not in (1, 2):
        raise ShapeError(f"{op}: stride {stride} not in (1, 2)")
    if padding not in ("same", "valid"):
        raise ValueError(f"{op}: padding must be 'same' or 'valid', got {padding!r}")
    if depthwise:
        if cin_w != 1:
            raise ShapeError(f"{op}: weight must be (C,1,k,k), got {w.shape}")
        if cout != x.shape[1]:
            raise ShapeError(f"{op}: input has {x.shape[1]} channels but weight "
                             f"covers {cout} (input {x.shape}, weight {w.shape})")
    elif x.shape[1] != cin_w:
        raise ShapeError(f"{op}: input has {x.shape[1]} channels but weight "
                         f"expects {cin_w} (input {x.shape}, weight {w.shape})")
    if b is not None and b.shape != (cout if not depthwise else x.shape[1], 1, 1, 1):
        raise ShapeError(f"{op}: bias shape {b.shape} incompatible with weight {w.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2D convolution; w is (Cout,Cin,k,k) with odd k, b is (Cout,1,1,1)."""
    operands = [x, w] + ([b] if b is not None else [])
    check_same_dtype("conv2d", *operands)
    _conv_checks("conv2d", x, w, b, stride, padding)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape

    if k == 1 and stride == 1:
        # pointwise fast path; padding is irrelevant at k=1
        xd = x.data
        wmat = w.data.reshape(cout, cin)
        out = _channel_map(xd, wmat)
        if b is not None:
            out += b.data.reshape(1, cout, 1, 1)

        def vjp_pw(g):
            dx, dw = _channel_map_vjp(g, xd, wmat)
            cots = [dx, dw.reshape(w.shape)]
            if b is not None:
                cots.append(g.sum(axis=(0, 2, 3)).reshape(cout, 1, 1, 1))
            return cots

        return record("conv2d", out, operands, vjp_pw)

    pad = k // 2 if padding == "same" else 0
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {k} "
                         f"with padding={padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    view = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, oh * ow, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = np.ascontiguousarray(
        (cols @ wmat.T).transpose(0, 2, 1).reshape(n, cout, oh, ow))
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def vjp(g):
        gm = np.ascontiguousarray(g.reshape(n, cout, oh * ow).transpose(0, 2, 1))
        dw = np.tensordot(gm, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
        dcols = gm @ wmat
        dview = dcols.reshape(n, oh, ow, cin, k, k).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                    dview[:, :, :, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        cots = [np.ascontiguousarray(dx), dw]
        if b is not None:
            cots.append(g.sum(axis=(0, 2, 3)).reshape(cout, 1, 1, 1))
        return cots

    return record("conv2d", out, operands, vjp)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
                     padding: str = "same") -> Tensor:
    """Per-channel convolution; w is (C,1,k,k), same padding only."""
    operands = [x, w] + ([b] if b is not None else [])
    check_same_dtype("depthwise_conv2d", *operands)
    if padding != "same":
        raise ValueError(f"depthwise_conv2d: only same padding, got {padding!r}")
    _conv_checks("depthwise_conv2d", x, w, b, 1, padding, depthwise=True)
    n, c, h, wd = x.shape
    k = w.shape[2]
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wk = w.data[:, 0]  # (C,k,k)
    out = np.zeros((n, c, h, wd), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + h, j:j + wd] * wk[:, i, j].reshape(1, c, 1, 1)
    if b is not None:
        out += b.data.reshape(1, c, 1, 1)

    def vjp(g):
        dw = np.zeros_like(w.data)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dw[:, 0, i, j] = (g * xp[:, :, i:i + h, j:j + wd]).sum(axis=(0, 2, 3))
                dxp[:, :, i:i + h, j:j + wd] += g * wk[:, i, j].reshape(1, c, 1, 1)
        dx = np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + wd])
        cots = [dx, dw]
        if b is not None:
            cots.append(g.sum(axis=(0, 2, 3)).reshape(c, 1, 1, 1))
        return cots

    return record("depthwise_conv2d", out, operands, vjp)


# ---------------------------------------------------------------------------
# layer normalization (channel axis, per spatial site)
# ---------------------------------------------------------------------------

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    check_same_dtype("layernorm", x, gamma, beta)
    c = x.shape[1]
    if gamma.shape != (c, 1, 1, 1) or beta.shape != (c, 1, 1, 1):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match {c} channels")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gam = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gam + beta.data.reshape(1, c, 1, 1)

    def vjp(g):
        dxhat = g * gam
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (g * xhat).sum(axis=(0, 2, 3)).reshape(c, 1, 1, 1)
        dbeta = g.sum(axis=(0, 2, 3)).reshape(c, 1, 1, 1)
        return dx, dgamma, dbeta

    return record("layernorm", out, [x, gamma, beta], vjp)
