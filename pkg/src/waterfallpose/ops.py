"""Differentiable primitives: convolution, interpolation, normalization, pooling.

All spatial tensors are NCHW. Convolution is cross-correlation plus bias,
evaluated through an im2col buffer and one BLAS matmul; the naive loop
reference used to validate it lives in the test suite, not here.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, make_op_output
from .errors import ConfigurationError, DimensionError

GELU_C0 = 0.7978845608  # sqrt(2/pi), fixed tanh-approximation constant
GELU_C1 = 0.044715


def _require(cond: bool, exc, msg: str):
    if not cond:
        raise exc(msg)


def _require_4d(x: Tensor, op: str):
    _require(x.data.ndim == 4, DimensionError, f"{op} expects NCHW input, got shape {tuple(x.shape)}")


def _same_dtype(op: str, *ts: Tensor):
    dts = {t.data.dtype for t in ts}
    _require(len(dts) == 1, DimensionError, f"{op}: mixed dtypes {sorted(d.name for d in dts)}")


# ---------------------------------------------------------------------------
# elementwise / reduction


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("add", a, b)
    _require(a.shape == b.shape, DimensionError, f"add: shapes {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return g, g

    return make_op_output("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype("mul", a, b)
    _require(a.shape == b.shape, DimensionError, f"mul: shapes {a.shape} vs {b.shape}")
    out = a.data * b.data

    def bwd(g):
        return g * b.data, g * a.data

    return make_op_output("mul", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return make_op_output("scale", (a,), out, bwd)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True),)

    return make_op_output("sum_all", (a,), out, bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation with pinned constants."""
    d = x.data
    c0 = d.dtype.type(GELU_C0)
    c1 = d.dtype.type(GELU_C1)
    d2 = d * d
    u = d2 * c1
    u += 1.0
    u *= d
    u *= c0
    t = np.tanh(u, out=u)
    out = (1.0 + t) * (0.5 * d)

    def bwd(g):
        du = d2 * (3.0 * c1)
        du += 1.0
        du *= c0
        dt = 1.0 - t * t
        dt *= du
        dt *= 0.5 * d
        dt += 0.5 * (1.0 + t)
        dt *= g
        return (dt,)

    return make_op_output("gelu", (x,), out, bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    d = x.data
    _require(d.shape[-1] >= 1, DimensionError, "softmax_lastdim: empty last axis")
    m = d.max(axis=-1, keepdims=True)
    e = np.exp(d - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return make_op_output("softmax_lastdim", (x,), out, bwd)


# ---------------------------------------------------------------------------
# convolution


def _conv_out_extent(size: int, kk: int, stride: int, padding: int, what: str) -> int:
    # floor semantics: trailing rows/cols that cannot seat a full window drop,
    # which is what stride-2 halving of even-sized maps relies on
    span = size + 2 * padding - kk
    _require(span >= 0, ConfigurationError,
             f"window does not fit along {what} "
             f"(size={size}, k={kk}, stride={stride}, padding={padding})")
    return span // stride + 1


def _im2col(xpad: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xpad.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xpad[:, :, i:i + stride * (ho - 1) + 1:stride,
                                    j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    _require_4d(x, "conv2d")
    _same_dtype("conv2d", x, w, b)
    _require(w.data.ndim == 4, DimensionError, f"conv2d: weight must be OCKK, got {tuple(w.shape)}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    _require(cw == c, DimensionError, f"conv2d: weight expects {cw} input channels, input has {c}")
    _require(kh % 2 == 1 and kw % 2 == 1, ConfigurationError, "conv2d: kernel extents must be odd")
    _require(b.data.shape == (o,), DimensionError, f"conv2d: bias shape {tuple(b.shape)} != ({o},)")
    ho = _conv_out_extent(h, kh, stride, padding, "height")
    wo = _conv_out_extent(wd, kw, stride, padding, "width")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c, h * wd)
    else:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols = _im2col(xpad, kh, kw, stride, ho, wo)
    wr = w.data.reshape(o, c * kh * kw)
    out = np.matmul(wr, cols)
    out += b.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def bwd(g):
        gr = g.reshape(n, o, ho * wo)
        db = gr.sum(axis=(0, 2))
        dw = np.matmul(gr, cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, kh, kw)
        dcols = np.matmul(wr.T, gr)
        if kh == 1 and kw == 1 and stride == 1 and padding == 0:
            dx = dcols.reshape(n, c, h, wd)
        else:
            dcols = dcols.reshape(n, c, kh, kw, ho, wo)
            dxpad = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxpad[:, :, i:i + stride * (ho - 1) + 1:stride,
                          j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
            dx = dxpad[:, :, padding:padding + h, padding:padding + wd]
            if padding:
                dx = np.ascontiguousarray(dx)
        return dx, dw, db

    return make_op_output("conv2d", (x, w, b), out, bwd)


def linear_channels(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel linear map over the channel axis (the 1x1-conv core)."""
    _require_4d(x, "linear_channels")
    _same_dtype("linear_channels", x, w, b)
    n, c, h, wd = x.shape
    o, cw = w.shape
    _require(cw == c, DimensionError, f"linear_channels: weight expects {cw} channels, input has {c}")
    _require(b.data.shape == (o,), DimensionError, "linear_channels: bias shape mismatch")
    x3 = x.data.reshape(n, c, h * wd)
    out = np.matmul(w.data, x3)
    out += b.data[None, :, None]
    out = out.reshape(n, o, h, wd)

    def bwd(g):
        g3 = g.reshape(n, o, h * wd)
        db = g3.sum(axis=(0, 2))
        dw = np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0)
        dx = np.matmul(w.data.T, g3).reshape(n, c, h, wd)
        return dx, dw, db

    return make_op_output("linear_channels", (x, w, b), out, bwd)


# ---------------------------------------------------------------------------
# interpolation / pooling / concat


def _interp_matrix(src: int, dst: int, dtype) -> np.ndarray:
    # align-corners=false source coordinates, clamped to the valid range
    r = np.zeros((dst, src), dtype=np.float64)
    ratio = src / dst
    for d in range(dst):
        s = (d + 0.5) * ratio - 0.5
        s = min(max(s, 0.0), src - 1.0)
        i0 = int(np.floor(s))
        frac = s - i0
        i1 = min(i0 + 1, src - 1)
        r[d, i0] += 1.0 - frac
        r[d, i1] += frac
    return r.astype(dtype)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _require_4d(x, "bilinear_upsample")
    n, c, h, w = x.shape
    _require(out_h >= h and out_w >= w, ConfigurationError,
             f"bilinear_upsample: downsampling {h}x{w} -> {out_h}x{out_w} not supported")
    rh = _interp_matrix(h, out_h, x.data.dtype)
    rw = _interp_matrix(w, out_w, x.data.dtype)
    out = np.einsum("oh,pw,nchw->ncop", rh, rw, x.data, optimize=True)

    def bwd(g):
        return (np.ascontiguousarray(np.einsum("oh,pw,ncop->nchw", rh, rw, g, optimize=True)),)

    return make_op_output("bilinear_upsample", (x,), out, bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    _require(len(xs) >= 1, DimensionError, "concat_channels: empty input list")
    for t in xs:
        _require_4d(t, "concat_channels")
    _same_dtype("concat_channels", *xs)
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        _require(t.shape[0] == n and t.shape[2] == h and t.shape[3] == w, DimensionError,
                 f"concat_channels: spatial/batch mismatch {t.shape} vs {(n, '*', h, w)}")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))

    return make_op_output("concat_channels", tuple(xs), out, bwd)


def depthwise_avg_pool(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel k x k mean; zero padded, normalized by in-bounds tap count."""
    _require_4d(x, "depthwise_avg_pool")
    _require(k > 0, ConfigurationError, f"depthwise_avg_pool: non-positive kernel {k}")
    _require(k % 2 == 1, ConfigurationError, f"depthwise_avg_pool: kernel must be odd, got {k}")
    n, c, h, w = x.shape
    ho = _conv_out_extent(h, k, stride, padding, "height")
    wo = _conv_out_extent(w, k, stride, padding, "width")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ones = np.pad(np.ones((1, 1, h, w), dtype=x.data.dtype),
                  ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sums = np.zeros((n, c, ho, wo), dtype=x.data.dtype)
    counts = np.zeros((1, 1, ho, wo), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + stride * (ho - 1) + 1, stride)
            cols = slice(j, j + stride * (wo - 1) + 1, stride)
            sums += xpad[:, :, rows, cols]
            counts += ones[:, :, rows, cols]
    out = sums / counts

    def bwd(g):
        gn = g / counts
        dxpad = np.zeros_like(xpad)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                cols = slice(j, j + stride * (wo - 1) + 1, stride)
                dxpad[:, :, rows, cols] += gn
        dx = dxpad[:, :, padding:padding + h, padding:padding + w]
        return (np.ascontiguousarray(dx) if padding else dx,)

    return make_op_output("depthwise_avg_pool", (x,), out, bwd)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize across channels at each (n, h, w) location."""
    _require_4d(x, "layer_norm")
    _same_dtype("layer_norm", x, gamma, beta)
    _require(eps > 0, ConfigurationError, "layer_norm: eps must be positive")
    n, c, h, w = x.shape
    _require(c > 0, DimensionError, "layer_norm: zero channels")
    _require(gamma.data.shape == (c,) and beta.data.shape == (c,), DimensionError,
             f"layer_norm: gamma/beta must have shape ({c},)")
    d = x.data
    mean = d.mean(axis=1, keepdims=True)
    xc = d - mean
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return make_op_output("layer_norm", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# MLP


def mlp_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                ratio: Optional[int] = None) -> Tensor:
    """Per-location two-layer perceptron: linear -> GELU -> linear.

    The residual connection belongs to the caller.
    """
    _require_4d(x, "mlp_forward")
    c = x.shape[1]
    hidden = w1.shape[0]
    _require(w1.data.shape == (hidden, c), DimensionError,
             f"mlp_forward: w1 shape {tuple(w1.shape)} incompatible with {c} channels")
    _require(w2.data.shape[1] == hidden, DimensionError,
             f"mlp_forward: w2 shape {tuple(w2.shape)} incompatible with hidden {hidden}")
    if ratio is not None:
        _require(hidden == ratio * c, DimensionError,
                 f"mlp_forward: hidden {hidden} != ratio {ratio} * channels {c}")
    h1 = linear_channels(x, w1, b1)
    a = gelu(h1)
    return linear_channels(a, w2, b2)


# ---------------------------------------------------------------------------
# loss


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over cells of mask-selected (n, k) maps.

    mask has shape [N, K]; the mean runs over visible maps x cells. A batch
    with no visible joints yields an exact zero with no gradient flow.
    """
    _require_4d(pred, "masked_mse")
    n, kk, h, w = pred.shape
    _require(target.shape == pred.data.shape, DimensionError,
             f"masked_mse: target shape {target.shape} != pred shape {pred.data.shape}")
    _require(mask.shape == (n, kk), DimensionError, f"masked_mse: mask shape {mask.shape} != {(n, kk)}")
    m = mask.astype(pred.data.dtype)
    visible = float(m.sum())
    if visible == 0.0:
        return Tensor(np.zeros((), dtype=pred.data.dtype), _check=False)
    denom = pred.data.dtype.type(visible * h * w)
    diff = (pred.data - target) * m[:, :, None, None]
    out = np.asarray((diff * diff).sum() / denom, dtype=pred.data.dtype)

    def bwd(g):
        return (g * 2.0 * diff / denom,)

    return make_op_output("masked_mse", (pred,), out, bwd)
