"""Dilated and non-dilated multi-head neighborhood self-attention over 2D maps.

Every pixel attends to a k x k grid of taps spaced `dilation` apart. Near
borders the grid is translated (never shrunk) in whole dilation steps so all
k^2 taps stay in bounds and tap offsets remain multiples of the dilation,
which keeps the relative-position bias table indexable. The hot loops are
numba-compiled; `na_oracle` recomputes the same definition with full-map
masked softmax and plain numpy loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from numba import njit

from .autodiff import Tensor, make_op_output, no_grad
from .errors import ConfigurationError, DimensionError
from .ops import linear_channels


def receptive_field(window: int, dilation: int) -> int:
    """Spatial extent covered by one attention hop: dilation*(window-1)+1."""
    if window % 2 != 1 or window < 1:
        raise ConfigurationError(f"receptive_field: window must be odd positive, got {window}")
    if dilation < 1:
        raise ConfigurationError(f"receptive_field: dilation must be >= 1, got {dilation}")
    return dilation * (window - 1) + 1


@dataclass
class AttentionConfig:
    window: int = 7
    dilation: int = 1
    heads: int = 8
    channels: int = 128

    def __post_init__(self):
        if self.window < 1 or self.window % 2 != 1:
            raise ConfigurationError(f"window must be odd positive, got {self.window}")
        if self.dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {self.dilation}")
        if self.heads < 1 or self.channels % self.heads != 0:
            raise ConfigurationError(
                f"channels {self.channels} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def validate_map(self, h: int, w: int):
        # Window translation happens in whole dilation steps, so every residue
        # class modulo the dilation must hold at least `window` positions;
        # that needs h, w >= window * dilation (no silent dilation reduction).
        need = self.window * self.dilation
        if h < need or w < need:
            raise ConfigurationError(
                f"feature map {h}x{w} too small for window {self.window} "
                f"with dilation {self.dilation} (needs at least {need}x{need})")


@dataclass
class AttentionProjections:
    """Per-pixel Q/K/V/output projections, each [C, C] plus bias [C]."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> List[Tensor]:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


@dataclass
class RelPosBias:
    """Learnable bias indexed by relative tap offset, shape [heads, 2k-1, 2k-1]."""
    table: Tensor

    @property
    def window(self) -> int:
        return (self.table.shape[1] + 1) // 2


def init_projections(channels: int, rng: np.random.Generator, dtype=np.float64,
                     std: float = 0.02) -> AttentionProjections:
    """Random Q/K/V, zero output projection so residual blocks start as identity."""
    def w():
        return Tensor(rng.normal(0.0, std, (channels, channels)).astype(dtype),
                      requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    return AttentionProjections(
        wq=w(), bq=zeros(channels), wk=w(), bk=zeros(channels),
        wv=w(), bv=zeros(channels), wo=zeros((channels, channels)), bo=zeros(channels))


def init_rel_pos_bias(window: int, heads: int, dtype=np.float64) -> RelPosBias:
    side = 2 * window - 1
    return RelPosBias(Tensor(np.zeros((heads, side, side), dtype=dtype), requires_grad=True))


# ---------------------------------------------------------------------------
# neighborhood geometry


def _axis_start(size: int, window: int, dilation: int, p: int) -> int:
    """Grid start along one axis: centered when possible, else translated in
    dilation steps within p's residue class so all taps stay in bounds."""
    span = (window - 1) * dilation
    hi_bound = size - 1 - span
    if hi_bound < 0:
        raise ConfigurationError(
            f"axis of size {size} cannot fit window {window} with dilation {dilation}")
    lo = p % dilation
    if lo > hi_bound:
        raise ConfigurationError(
            f"pixel {p} (residue {lo} mod {dilation}) has no in-bounds window "
            f"of size {window} on axis of size {size}")
    hi = lo + ((hi_bound - lo) // dilation) * dilation
    centered = p - ((window - 1) // 2) * dilation
    return min(max(centered, lo), hi)


def neighborhood_indices(h: int, w: int, window: int, dilation: int,
                         p: Tuple[int, int]) -> List[Tuple[int, int]]:
    """The k^2 tap coordinates for pixel p, row-major over the grid."""
    if window % 2 != 1 or window < 1:
        raise ConfigurationError(f"window must be odd positive, got {window}")
    if dilation < 1:
        raise ConfigurationError(f"dilation must be >= 1, got {dilation}")
    pi, pj = p
    if not (0 <= pi < h and 0 <= pj < w):
        raise DimensionError(f"pixel {p} outside {h}x{w} map")
    i0 = _axis_start(h, window, dilation, pi)
    j0 = _axis_start(w, window, dilation, pj)
    return [(i0 + a * dilation, j0 + b * dilation)
            for a in range(window) for b in range(window)]


class NeighborhoodPlan:
    """Precomputed flat tap indices and relative-bias indices for one map size."""

    def __init__(self, h: int, w: int, window: int, dilation: int):
        AttentionConfig(window=window, dilation=dilation, heads=1,
                        channels=1).validate_map(h, w)
        self.h, self.w, self.window, self.dilation = h, w, window, dilation
        k2 = window * window
        side = 2 * window - 1
        nbr = np.empty((h * w, k2), dtype=np.int32)
        rel = np.empty((h * w, k2), dtype=np.int32)
        for pi in range(h):
            for pj in range(w):
                p = pi * w + pj
                for t, (qi, qj) in enumerate(neighborhood_indices(h, w, window, dilation, (pi, pj))):
                    nbr[p, t] = qi * w + qj
                    # offsets are exact multiples of the dilation by construction
                    rel[p, t] = ((qi - pi) // dilation + window - 1) * side \
                        + ((qj - pj) // dilation + window - 1)
        self.nbr = nbr
        self.rel = rel


_PLAN_CACHE: Dict[Tuple[int, int, int, int], NeighborhoodPlan] = {}


def get_plan(h: int, w: int, window: int, dilation: int) -> NeighborhoodPlan:
    key = (h, w, window, dilation)
    plan = _PLAN_CACHE.get(key)
    if plan is None:
        plan = NeighborhoodPlan(h, w, window, dilation)
        _PLAN_CACHE[key] = plan
    return plan


# ---------------------------------------------------------------------------
# numba kernels (sequential loops, deterministic accumulation)


@njit(cache=True, fastmath=True)
def _scores_kernel(q, k, nbr, rel, bias, scale, out):
    n_, h_, p_, c_ = q.shape
    k2 = nbr.shape[1]
    for n in range(n_):
        for hh in range(h_):
            for p in range(p_):
                qrow = q[n, hh, p]
                for a in range(k2):
                    krow = k[n, hh, nbr[p, a]]
                    s = scale - scale   # typed zero
                    for c in range(c_):
                        s += qrow[c] * krow[c]
                    out[n, hh, p, a] = s * scale + bias[hh, rel[p, a]]


@njit(cache=True, fastmath=True)
def _weighted_sum_kernel(attn, v, nbr, out):
    n_, h_, p_, k2 = attn.shape
    c_ = v.shape[3]
    for n in range(n_):
        for hh in range(h_):
            for p in range(p_):
                acc = out[n, hh, p]
                for a in range(k2):
                    w = attn[n, hh, p, a]
                    vrow = v[n, hh, nbr[p, a]]
                    for c in range(c_):
                        acc[c] += w * vrow[c]


@njit(cache=True, fastmath=True)
def _backward_kernel(g, attn, q, k, v, nbr, rel, scale, dq, dk, dv, dbias):
    n_, h_, p_, c_ = q.shape
    k2 = nbr.shape[1]
    zero = scale - scale
    dattn = np.empty(k2, dtype=g.dtype)
    for n in range(n_):
        for hh in range(h_):
            for p in range(p_):
                grow = g[n, hh, p]
                # d(out)/d(attn) and scatter into dv
                for a in range(k2):
                    j = nbr[p, a]
                    w = attn[n, hh, p, a]
                    da = zero
                    vrow = v[n, hh, j]
                    dvrow = dv[n, hh, j]
                    for c in range(c_):
                        da += grow[c] * vrow[c]
                        dvrow[c] += w * grow[c]
                    dattn[a] = da
                # softmax backward, then bias / q / k accumulation
                dot = zero
                for a in range(k2):
                    dot += dattn[a] * attn[n, hh, p, a]
                qrow = q[n, hh, p]
                dqrow = dq[n, hh, p]
                for a in range(k2):
                    ds = attn[n, hh, p, a] * (dattn[a] - dot)
                    dbias[hh, rel[p, a]] += ds
                    dss = ds * scale
                    j = nbr[p, a]
                    krow = k[n, hh, j]
                    dkrow = dk[n, hh, j]
                    for c in range(c_):
                        dqrow[c] += dss * krow[c]
                        dkrow[c] += dss * qrow[c]


def _to_heads(data: np.ndarray, heads: int) -> np.ndarray:
    n, c, h, w = data.shape
    hd = c // heads
    return np.ascontiguousarray(
        data.reshape(n, heads, hd, h * w).transpose(0, 1, 3, 2))


def _from_heads(data: np.ndarray, h: int, w: int) -> np.ndarray:
    n, heads, hw, hd = data.shape
    return np.ascontiguousarray(
        data.transpose(0, 1, 3, 2).reshape(n, heads * hd, h, w))


def na_core(q: Tensor, k: Tensor, v: Tensor, bias: Tensor, plan: NeighborhoodPlan,
            heads: int) -> Tensor:
    """Neighborhood attention over projected q/k/v, as one differentiable op."""
    n, c, h, w = q.shape
    hd = c // heads
    scale = q.data.dtype.type(1.0 / math.sqrt(hd))
    qh = _to_heads(q.data, heads)
    kh = _to_heads(k.data, heads)
    vh = _to_heads(v.data, heads)
    side = 2 * plan.window - 1
    bias2 = np.ascontiguousarray(bias.data.reshape(heads, side * side))

    scores = np.empty((n, heads, h * w, plan.window ** 2), dtype=q.data.dtype)
    _scores_kernel(qh, kh, plan.nbr, plan.rel, bias2, scale, scores)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    attn = e / e.sum(axis=-1, keepdims=True)
    outh = np.zeros((n, heads, h * w, hd), dtype=q.data.dtype)
    _weighted_sum_kernel(attn, vh, plan.nbr, outh)
    out = _from_heads(outh, h, w)

    def bwd(g):
        gh = _to_heads(g, heads)
        dq = np.zeros_like(qh)
        dk = np.zeros_like(kh)
        dv = np.zeros_like(vh)
        dbias2 = np.zeros_like(bias2)
        _backward_kernel(gh, attn, qh, kh, vh, plan.nbr, plan.rel, scale,
                         dq, dk, dv, dbias2)
        return (_from_heads(dq, h, w), _from_heads(dk, h, w), _from_heads(dv, h, w),
                dbias2.reshape(heads, side, side))

    return make_op_output("na_core", (q, k, v, bias), out, bwd)


def na_forward(x: Tensor, cfg: AttentionConfig, proj: AttentionProjections,
               bias: RelPosBias) -> Tensor:
    """Multi-head neighborhood self-attention; dilation 1 gives the non-dilated form."""
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise DimensionError(f"na_forward: input has {c} channels, config expects {cfg.channels}")
    cfg.validate_map(h, w)
    plan = get_plan(h, w, cfg.window, cfg.dilation)
    q = linear_channels(x, proj.wq, proj.bq)
    k = linear_channels(x, proj.wk, proj.bk)
    v = linear_channels(x, proj.wv, proj.bv)
    core = na_core(q, k, v, bias.table, plan, cfg.heads)
    return linear_channels(core, proj.wo, proj.bo)


def attention_weights(x: Tensor, cfg: AttentionConfig, proj: AttentionProjections,
                      bias: RelPosBias) -> np.ndarray:
    """Softmax weights [N, heads, H*W, k^2] at every pixel (diagnostic path)."""
    n, c, h, w = x.shape
    cfg.validate_map(h, w)
    plan = get_plan(h, w, cfg.window, cfg.dilation)
    with no_grad():
        q = linear_channels(x, proj.wq, proj.bq)
        k = linear_channels(x, proj.wk, proj.bk)
    qh = _to_heads(q.data, cfg.heads)
    kh = _to_heads(k.data, cfg.heads)
    side = 2 * cfg.window - 1
    bias2 = np.ascontiguousarray(bias.table.data.reshape(cfg.heads, side * side))
    scores = np.empty((n, cfg.heads, h * w, cfg.window ** 2), dtype=x.data.dtype)
    _scores_kernel(qh, kh, plan.nbr, plan.rel, bias2,
                   x.data.dtype.type(1.0 / math.sqrt(cfg.head_dim)), scores)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def na_oracle(x: Tensor, cfg: AttentionConfig, proj: AttentionProjections,
              bias: RelPosBias) -> Tensor:
    """Same attention definition via full H*W score vectors with -inf masking.

    Deliberately simple and slow; used to cross-check na_forward.
    """
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise DimensionError(f"na_oracle: input has {c} channels, config expects {cfg.channels}")
    cfg.validate_map(h, w)
    heads, hd = cfg.heads, cfg.head_dim
    side = 2 * cfg.window - 1
    xf = x.data.reshape(n, c, h * w)
    q = np.matmul(proj.wq.data, xf) + proj.bq.data[None, :, None]
    k = np.matmul(proj.wk.data, xf) + proj.bk.data[None, :, None]
    v = np.matmul(proj.wv.data, xf) + proj.bv.data[None, :, None]
    q = q.reshape(n, heads, hd, h * w)
    k = k.reshape(n, heads, hd, h * w)
    v = v.reshape(n, heads, hd, h * w)
    scale = 1.0 / math.sqrt(hd)

    out = np.zeros((n, heads, hd, h * w), dtype=x.data.dtype)
    for pi in range(h):
        for pj in range(w):
            p = pi * w + pj
            taps = neighborhood_indices(h, w, cfg.window, cfg.dilation, (pi, pj))
            for b in range(n):
                for hh in range(heads):
                    full = np.full(h * w, -np.inf, dtype=np.float64)
                    for (qi, qj) in taps:
                        qq = qi * w + qj
                        s = float(np.dot(q[b, hh, :, p], k[b, hh, :, qq])) * scale
                        s += float(bias.table.data[hh,
                                                   (qi - pi) // cfg.dilation + cfg.window - 1,
                                                   (qj - pj) // cfg.dilation + cfg.window - 1])
                        full[qq] = s
                    full -= full.max()
                    weights = np.exp(full)
                    weights /= weights.sum()
                    out[b, hh, :, p] = (v[b, hh] * weights[None, :]).sum(axis=1)
    out = out.reshape(n, c, h * w)
    out = np.matmul(proj.wo.data, out) + proj.bo.data[None, :, None]
    return Tensor(out.reshape(n, c, h, w).astype(x.data.dtype), _check=False)
