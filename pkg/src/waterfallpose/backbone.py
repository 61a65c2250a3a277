"""Hierarchical backbone stand-in: conv stem, residual bottleneck, four stages.

The stem downsamples by 4 with two 3x3 stride-2 convolutions; the bottleneck
residual block supplies the low-level feature map. Stages are built from
non-dilated neighborhood-attention blocks and stride-2 downsampling convs,
emitting the stride 4/8/16/32 pyramid the waterfall neck consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .autodiff import Tensor
from .errors import ConfigurationError
from .layers import (AttentionSublayer, LayerNormParams, MlpSublayer,
                     attention_sublayer_forward, init_attention_sublayer, init_conv,
                     init_layer_norm, init_mlp_sublayer, mlp_sublayer_forward)
from .ops import add, conv2d, gelu, layer_norm


@dataclass
class BackboneConfig:
    stage_channels: Tuple[int, int, int, int] = (32, 64, 128, 256)
    blocks_per_stage: Tuple[int, int, int, int] = (1, 1, 1, 1)
    stem_channels: int = 32
    llf_channels: int = 64
    llf_mid_channels: int = 16
    window: int = 7
    heads: Tuple[int, int, int, int] = (2, 2, 4, 4)
    mlp_ratio: int = 4

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigurationError("backbone needs exactly 4 stages")
        for c, h in zip(self.stage_channels, self.heads):
            if c % h != 0:
                raise ConfigurationError(f"stage channels {c} not divisible by {h} heads")


@dataclass
class FeaturePyramid:
    """Stage outputs f1..f4 at strides 4/8/16/32 plus stride-4 low-level features."""
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    f_llf: Tensor

    def stages(self) -> List[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]

    @property
    def channels(self) -> Tuple[int, ...]:
        return tuple(f.shape[1] for f in self.stages())


@dataclass
class ConvNorm:
    w: Tensor
    b: Tensor
    norm: LayerNormParams


@dataclass
class StageParams:
    down_w: Tensor | None
    down_b: Tensor | None
    down_stride: int   # 2 for stage 2..4 downsampling, 1 for a stage-1 projection
    blocks: List[Tuple[AttentionSublayer, MlpSublayer]]


@dataclass
class BackboneParams:
    cfg: BackboneConfig
    stem1: ConvNorm
    stem2: ConvNorm
    bn_reduce: ConvNorm   # bottleneck 1x1 reduce
    bn_conv: ConvNorm     # bottleneck 3x3
    bn_expand: ConvNorm   # bottleneck 1x1 expand
    bn_short_w: Tensor | None = None   # projection shortcut, only if widths differ
    bn_short_b: Tensor | None = None
    stages: List[StageParams] = field(default_factory=list)


def pick_window(preferred: int, h: int, w: int) -> int:
    """Largest odd window out of (preferred, 3, 1) that fits the map."""
    m = min(h, w)
    if m >= preferred:
        return preferred
    return 3 if m >= 3 else 1


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype,
                  input_hw: Tuple[int, int]) -> BackboneParams:
    h, w = input_hw
    if h % 32 or w % 32:
        raise ConfigurationError(f"input {h}x{w} must be divisible by 32")

    def conv_norm(out_ch, in_ch, k):
        cw, cb = init_conv(out_ch, in_ch, k, rng, dtype)
        return ConvNorm(cw, cb, init_layer_norm(out_ch, dtype))

    sc = cfg.stem_channels
    params = BackboneParams(
        cfg=cfg,
        stem1=conv_norm(sc, 3, 3),
        stem2=conv_norm(sc, sc, 3),
        bn_reduce=conv_norm(cfg.llf_mid_channels, sc, 1),
        bn_conv=conv_norm(cfg.llf_mid_channels, cfg.llf_mid_channels, 3),
        bn_expand=conv_norm(cfg.llf_channels, cfg.llf_mid_channels, 1))
    if cfg.llf_channels != sc:
        params.bn_short_w, params.bn_short_b = init_conv(cfg.llf_channels, sc, 1, rng, dtype)

    sh, sw = h // 4, w // 4
    in_ch = sc
    for i, out_ch in enumerate(cfg.stage_channels):
        if i > 0:
            sh, sw = sh // 2, sw // 2
            dw, db = init_conv(out_ch, in_ch, 3, rng, dtype)
            stride = 2
        elif in_ch != out_ch:
            dw, db = init_conv(out_ch, in_ch, 1, rng, dtype)
            stride = 1
        else:
            dw = db = None
            stride = 1
        window = pick_window(cfg.window, sh, sw)
        blocks = []
        for _ in range(cfg.blocks_per_stage[i]):
            blocks.append((init_attention_sublayer(out_ch, window, 1, cfg.heads[i], rng, dtype),
                           init_mlp_sublayer(out_ch, cfg.mlp_ratio, rng, dtype)))
        params.stages.append(StageParams(dw, db, stride, blocks))
        in_ch = out_ch
    return params


def _conv_norm_act(x: Tensor, p: ConvNorm, stride: int, padding: int,
                   activate: bool = True) -> Tensor:
    y = conv2d(x, p.w, p.b, stride=stride, padding=padding)
    y = layer_norm(y, p.norm.gamma, p.norm.beta, p.norm.eps)
    return gelu(y) if activate else y


def stem_forward(img: Tensor, params: BackboneParams) -> Tensor:
    """Two 3x3 stride-2 convolutions, each with channel norm and GELU; net stride 4."""
    _, _, h, w = img.shape
    if h % 32 or w % 32:
        raise ConfigurationError(f"input {h}x{w} must be divisible by 32")
    x = _conv_norm_act(img, params.stem1, stride=2, padding=1)
    return _conv_norm_act(x, params.stem2, stride=2, padding=1)


def bottleneck_forward(x: Tensor, params: BackboneParams) -> Tensor:
    """Residual bottleneck (1x1 reduce, 3x3, 1x1 expand) with projection shortcut."""
    y = _conv_norm_act(x, params.bn_reduce, stride=1, padding=0)
    y = _conv_norm_act(y, params.bn_conv, stride=1, padding=1)
    y = _conv_norm_act(y, params.bn_expand, stride=1, padding=0, activate=False)
    if params.bn_short_w is not None:
        short = conv2d(x, params.bn_short_w, params.bn_short_b, stride=1, padding=0)
    else:
        short = x
    return gelu(add(y, short))


def stage_forward(x: Tensor, stage: StageParams) -> Tensor:
    """Optional downsampling/projection conv, then attention + MLP residual blocks."""
    if stage.down_w is not None:
        pad = 1 if stage.down_stride == 2 else 0
        x = conv2d(x, stage.down_w, stage.down_b, stride=stage.down_stride, padding=pad)
    for attn_sub, mlp_sub in stage.blocks:
        x = attention_sublayer_forward(x, attn_sub)
        x = mlp_sublayer_forward(x, mlp_sub)
    return x


def backbone_forward(img: Tensor, params: BackboneParams) -> FeaturePyramid:
    x = stem_forward(img, params)
    f_llf = bottleneck_forward(x, params)
    feats = []
    for stage in params.stages:
        x = stage_forward(x, stage)
        feats.append(x)
    return FeaturePyramid(feats[0], feats[1], feats[2], feats[3], f_llf)


def iter_backbone_tensors(params: BackboneParams):
    for cn in (params.stem1, params.stem2, params.bn_reduce, params.bn_conv, params.bn_expand):
        yield cn.w
        yield cn.b
        yield cn.norm.gamma
        yield cn.norm.beta
    if params.bn_short_w is not None:
        yield params.bn_short_w
        yield params.bn_short_b
    for stage in params.stages:
        if stage.down_w is not None:
            yield stage.down_w
            yield stage.down_b
        for attn_sub, mlp_sub in stage.blocks:
            yield from attn_sub.tensors()
            yield from mlp_sub.tensors()
