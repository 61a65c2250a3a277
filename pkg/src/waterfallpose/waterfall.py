"""Waterfall neck: pyramid fusion, four cascaded attention blocks, output fusion.

Each cascade block runs a dilated attention sublayer, an MLP, a non-dilated
attention sublayer, and another MLP, all with pre-norm residuals. Every block
output feeds both the next block and the final concatenation, together with a
depth-wise pooled copy of the fused pyramid; a 1x1 convolution reduces the
streams, and two 3x3 convolutions merge in the low-level features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .attention import receptive_field
from .backbone import FeaturePyramid
from .errors import ConfigurationError, DimensionError
from .layers import (AttentionSublayer, MlpSublayer, attention_sublayer_forward,
                     init_attention_sublayer, init_conv, init_mlp_sublayer,
                     mlp_sublayer_forward)
from .ops import bilinear_upsample, concat_channels, conv2d, depthwise_avg_pool


@dataclass
class WaterfallConfig:
    embed_channels: int = 128
    block_dilations: Tuple[Tuple[int, int], ...] = ((2, 1), (4, 1), (4, 1), (8, 1))
    window: int = 7
    heads: int = 8
    mlp_ratio: int = 4
    pool_kernel: int = 3
    low_level_channels: int = 128
    out_channels: int = 128

    def __post_init__(self):
        self.block_dilations = tuple(tuple(p) for p in self.block_dilations)
        if len(self.block_dilations) != 4:
            raise ConfigurationError(
                f"waterfall cascade has exactly 4 blocks, got {len(self.block_dilations)}")
        for pair in self.block_dilations:
            if len(pair) != 2 or min(pair) < 1:
                raise ConfigurationError(f"bad dilation pair {pair}")
        if self.embed_channels % self.heads != 0:
            raise ConfigurationError(
                f"embed channels {self.embed_channels} not divisible by {self.heads} heads")


@dataclass
class BlockParams:
    """One cascade block: dilated attention, MLP, local attention, MLP."""
    dilated: AttentionSublayer
    mlp1: MlpSublayer
    local: AttentionSublayer
    mlp2: MlpSublayer

    def tensors(self):
        yield from self.dilated.tensors()
        yield from self.mlp1.tensors()
        yield from self.local.tensors()
        yield from self.mlp2.tensors()


@dataclass
class WaterfallParams:
    cfg: WaterfallConfig
    reduce_w: Tensor   # 1x1 over the fused pyramid
    reduce_b: Tensor
    blocks: Tuple[BlockParams, ...]
    stream_w: Tensor   # 1x1 over [z1..z4, pooled g0]
    stream_b: Tensor
    llf_w: Tensor      # 1x1 reduction of low-level features
    llf_b: Tensor
    merge1_w: Tensor   # 3x3, concat width -> out
    merge1_b: Tensor
    merge2_w: Tensor   # 3x3, out -> out
    merge2_b: Tensor

    def tensors(self):
        yield self.reduce_w
        yield self.reduce_b
        for bp in self.blocks:
            yield from bp.tensors()
        for t in (self.stream_w, self.stream_b, self.llf_w, self.llf_b,
                  self.merge1_w, self.merge1_b, self.merge2_w, self.merge2_b):
            yield t


def init_block(cfg: WaterfallConfig, dilations: Tuple[int, int],
               rng: np.random.Generator, dtype) -> BlockParams:
    c = cfg.embed_channels
    return BlockParams(
        dilated=init_attention_sublayer(c, cfg.window, dilations[0], cfg.heads, rng, dtype),
        mlp1=init_mlp_sublayer(c, cfg.mlp_ratio, rng, dtype),
        local=init_attention_sublayer(c, cfg.window, dilations[1], cfg.heads, rng, dtype),
        mlp2=init_mlp_sublayer(c, cfg.mlp_ratio, rng, dtype))


def init_waterfall(cfg: WaterfallConfig, pyramid_channels: Sequence[int], llf_channels: int,
                   rng: np.random.Generator, dtype=np.float64) -> WaterfallParams:
    g0_ch = int(sum(pyramid_channels))
    c = cfg.embed_channels
    reduce_w, reduce_b = init_conv(c, g0_ch, 1, rng, dtype)
    stream_w, stream_b = init_conv(c, 4 * c + g0_ch, 1, rng, dtype)
    llf_w, llf_b = init_conv(cfg.low_level_channels, llf_channels, 1, rng, dtype)
    merge1_w, merge1_b = init_conv(cfg.out_channels, cfg.low_level_channels + c, 3, rng, dtype)
    merge2_w, merge2_b = init_conv(cfg.out_channels, cfg.out_channels, 3, rng, dtype)
    blocks = tuple(init_block(cfg, d, rng, dtype) for d in cfg.block_dilations)
    return WaterfallParams(cfg, reduce_w, reduce_b, blocks, stream_w, stream_b,
                           llf_w, llf_b, merge1_w, merge1_b, merge2_w, merge2_b)


# ---------------------------------------------------------------------------
# forward pieces


def fuse_pyramid(pyramid: FeaturePyramid) -> Tensor:
    """Upsample stages 2..4 to stage-1 size and concatenate along channels."""
    f1, f2, f3, f4 = pyramid.f1, pyramid.f2, pyramid.f3, pyramid.f4
    _, _, h1, w1 = f1.shape
    for idx, f in enumerate((f2, f3, f4), start=2):
        factor = 2 ** (idx - 1)
        if f.shape[2] * factor != h1 or f.shape[3] * factor != w1:
            raise DimensionError(
                f"stage {idx} size {f.shape[2]}x{f.shape[3]} breaks the exact 2x ladder "
                f"against stage 1 {h1}x{w1}")
    ups = [bilinear_upsample(f, h1, w1) for f in (f2, f3, f4)]
    return concat_channels([f1] + ups)


def reduce_channels(g0: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return conv2d(g0, w, b, stride=1, padding=0)


def block_forward(z: Tensor, p: BlockParams) -> Tensor:
    z = attention_sublayer_forward(z, p.dilated)
    z = mlp_sublayer_forward(z, p.mlp1)
    z = attention_sublayer_forward(z, p.local)
    return mlp_sublayer_forward(z, p.mlp2)


def waterfall_forward(z0: Tensor, params: WaterfallParams, g0: Tensor) -> Tensor:
    """Cascade the blocks, concat all streams plus pooled g0, reduce to embed width."""
    if z0.shape[2:] != g0.shape[2:]:
        raise DimensionError(f"z0 {z0.shape} and g0 {g0.shape} not spatially aligned")
    streams: List[Tensor] = []
    z = z0
    for bp in params.blocks:
        z = block_forward(z, bp)
        streams.append(z)
    k = params.cfg.pool_kernel
    pooled = depthwise_avg_pool(g0, k=k, stride=1, padding=k // 2)
    cat = concat_channels(streams + [pooled])
    return conv2d(cat, params.stream_w, params.stream_b, stride=1, padding=0)


def merge_low_level(f_waterfall: Tensor, f_llf: Tensor, params: WaterfallParams) -> Tensor:
    """Reduce low-level features, concat, then two plain 3x3 convolutions."""
    if f_waterfall.shape[2:] != f_llf.shape[2:]:
        raise DimensionError(
            f"low-level features {f_llf.shape} not aligned with {f_waterfall.shape}")
    llf = conv2d(f_llf, params.llf_w, params.llf_b, stride=1, padding=0)
    cat = concat_channels([llf, f_waterfall])
    y = conv2d(cat, params.merge1_w, params.merge1_b, stride=1, padding=1)
    return conv2d(y, params.merge2_w, params.merge2_b, stride=1, padding=1)


def waterfall_module_forward(pyramid: FeaturePyramid, params: WaterfallParams) -> Tensor:
    """Full neck: fuse, reduce, cascade, merge; stride-4 output maps."""
    g0 = fuse_pyramid(pyramid)
    z0 = reduce_channels(g0, params.reduce_w, params.reduce_b)
    f_wf = waterfall_forward(z0, params, g0)
    return merge_low_level(f_wf, pyramid.f_llf, params)


def block_receptive_fields(cfg: WaterfallConfig) -> Tuple[List[int], List[int]]:
    """One-hop receptive extents of the dilated and local attention layers."""
    dilated = [receptive_field(cfg.window, d) for d, _ in cfg.block_dilations]
    local = [receptive_field(cfg.window, d) for _, d in cfg.block_dilations]
    return dilated, local
