"""Differentiable operations over :class:`slotseg.tensor.Tensor`.

Every op computes its forward result eagerly with numpy and registers a
backward closure on the global tape. Shapes follow the conventions used
throughout the package: feature maps are HWC, flattened spatial features
and slot matrices are (rows, channels).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ShapeError
from .tensor import Tensor, record_op

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _check_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.data.dtype}; use one global dtype")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data + b.data
    return record_op("add", (a, b), out,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data - b.data
    return record_op("sub", (a, b), out,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape) * -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data * b.data
    return record_op("mul", (a, b), out,
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data / b.data
    return record_op("div", (a, b), out,
                     lambda g: (_unbroadcast(g / b.data, a.shape),
                                _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return record_op("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return record_op("scale", (a,), a.data * s, lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return record_op("matmul", (a, b), out,
                     lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = np.ascontiguousarray(a.data.T)
    return record_op("transpose", (a,), out, lambda g: (np.ascontiguousarray(g.T),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    in_shape = a.shape
    return record_op("reshape", (a,), np.ascontiguousarray(out),
                     lambda g: (g.reshape(in_shape),))


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not 0 <= axis < a.ndim:
        raise ShapeError(f"narrow axis {axis} out of range for shape {a.shape}")
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis of size {a.shape[axis]}")
    index = tuple(slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim))

    def bw(g):
        dx = np.zeros_like(a.data)
        dx[index] = g
        return (dx,)

    return record_op("narrow", (a,), np.ascontiguousarray(a.data[index]), bw)


def pad2d(a: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Zero-pad an HWC map at the bottom/right edges."""
    if a.ndim != 3:
        raise ShapeError(f"pad2d expects HWC, got shape {a.shape}")
    out = np.pad(a.data, ((0, pad_h), (0, pad_w), (0, 0)))
    h, w = a.shape[0], a.shape[1]
    return record_op("pad2d", (a,), out, lambda g: (np.ascontiguousarray(g[:h, :w, :]),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return record_op("concat", tuple(tensors), out, bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op("relu", (a,), a.data * mask, lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    e = erf(x * _INV_SQRT2)
    out = 0.5 * x * (1.0 + e)

    def bw(g):
        local = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * local,)

    return record_op("gelu", (a,), out, bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return record_op("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return record_op("sqrt", (a,), out, lambda g: (g * (0.5 / out),))


def softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return record_op("softmax", (a,), out, bw)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"log_softmax axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_z
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record_op("log_softmax", (a,), out, bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm channel mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    _check_same_dtype(x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return record_op("layer_norm", (x, gain, bias), out, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is None:
        return record_op("linear", (x, w), out,
                         lambda g: (g @ w.data.T, x.data.T @ g))
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear bias shape {b.shape} incompatible with weight {w.shape}")
    out = out + b.data
    return record_op("linear", (x, w, b), out,
                     lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def conv2d_1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution on an HWC map; w is (Cin, Cout)."""
    if x.ndim != 3 or x.shape[2] != w.shape[0]:
        raise ShapeError(f"conv2d_1x1 channel mismatch: map {x.shape}, weight {w.shape}")
    h, wd = x.shape[0], x.shape[1]
    flat = reshape(x, (h * wd, x.shape[2]))
    return reshape(linear(flat, w, b), (h, wd, w.shape[1]))


def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution on an HWC map, zero padding 1, stride 1 or 2."""
    if x.ndim != 3 or w.shape[:3] != (3, 3, x.shape[2]):
        raise ShapeError(f"conv2d_3x3 shape mismatch: map {x.shape}, weight {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d_3x3 stride must be 1 or 2, got {stride}")
    h, wd, cin = x.shape
    cout = w.shape[3]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    blocks = []
    for di in range(3):
        for dj in range(3):
            blocks.append(xp[di:di + stride * (ho - 1) + 1:stride,
                             dj:dj + stride * (wo - 1) + 1:stride, :].reshape(ho * wo, cin))
    col = np.concatenate(blocks, axis=1)
    w2d = w.data.reshape(9 * cin, cout)
    out = col @ w2d
    if b is not None:
        out = out + b.data

    def bw(g):
        g2d = g.reshape(ho * wo, cout)
        dcol = g2d @ w2d.T
        dxp = np.zeros_like(xp)
        for k in range(9):
            di, dj = divmod(k, 3)
            dxp[di:di + stride * (ho - 1) + 1:stride,
                dj:dj + stride * (wo - 1) + 1:stride, :] += \
                dcol[:, k * cin:(k + 1) * cin].reshape(ho, wo, cin)
        dx = np.ascontiguousarray(dxp[1:1 + h, 1:1 + wd, :])
        dw = (col.T @ g2d).reshape(3, 3, cin, cout)
        if b is None:
            return (dx, dw)
        return (dx, dw, g2d.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return record_op("conv2d_3x3", inputs, out.reshape(ho, wo, cout), bw)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Row-stochastic 2n-by-n interpolation weights for exact 2x upsampling."""
    u = np.zeros((2 * n, n), dtype=dtype)
    for a in range(2 * n):
        src = a / 2.0 - 0.25
        i0 = int(np.floor(src))
        t = src - i0
        u[a, min(max(i0, 0), n - 1)] += 1.0 - t
        u[a, min(max(i0 + 1, 0), n - 1)] += t
    return u


def bilinear_upsample_2x(x: Tensor) -> Tensor:
    """Double both spatial dims of an HWC map with bilinear interpolation."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample_2x expects HWC, got shape {x.shape}")
    h, w, _ = x.shape
    uh = _upsample_matrix(h, x.data.dtype)
    uw = _upsample_matrix(w, x.data.dtype)
    out = np.einsum("ah,hwc,bw->abc", uh, x.data, uw, optimize=True)

    def bw(g):
        return (np.einsum("ah,abc,bw->hwc", uh, g, uw, optimize=True),)

    return record_op("bilinear_upsample_2x", (x,), np.ascontiguousarray(out), bw)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return record_op("sum", (a,), np.asarray(out), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy() / count,)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.shape).copy() / count,)

    return record_op("mean", (a,), np.asarray(out), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bw(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return record_op("gather_rows", (a,), np.ascontiguousarray(out), bw)


def take_per_row(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a matrix a."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row needs matrix + per-row index, got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx]

    def bw(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, (rows, idx), g)
        return (dx,)

    return record_op("take_per_row", (a,), np.ascontiguousarray(out), bw)
