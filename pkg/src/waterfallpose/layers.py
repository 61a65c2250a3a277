"""Shared parameter containers and residual sublayers.

Both the backbone stages and the waterfall cascade are built from the same
two pre-norm residual sublayers: neighborhood attention and a pixelwise MLP.
Output projections and second MLP linears start at zero, so every residual
sublayer is an exact identity at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .autodiff import Tensor
from .attention import (AttentionConfig, AttentionProjections, RelPosBias,
                        init_projections, init_rel_pos_bias, na_forward)
from .ops import add, layer_norm, mlp_forward


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class AttentionSublayer:
    cfg: AttentionConfig
    proj: AttentionProjections
    bias: RelPosBias
    norm: LayerNormParams

    def tensors(self):
        yield from self.proj.tensors()
        yield self.bias.table
        yield self.norm.gamma
        yield self.norm.beta


@dataclass
class MlpSublayer:
    mlp: MlpParams
    norm: LayerNormParams

    def tensors(self):
        yield self.norm.gamma
        yield self.norm.beta
        yield self.mlp.w1
        yield self.mlp.b1
        yield self.mlp.w2
        yield self.mlp.b2


def init_layer_norm(channels: int, dtype) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                           Tensor(np.zeros(channels, dtype=dtype), requires_grad=True))


def init_mlp(channels: int, ratio: int, rng: np.random.Generator, dtype,
             std: float = 0.02) -> MlpParams:
    hidden = ratio * channels
    # zero second linear keeps the residual sublayer an identity at init
    return MlpParams(
        w1=Tensor(rng.normal(0.0, std, (hidden, channels)).astype(dtype), requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=Tensor(np.zeros((channels, hidden), dtype=dtype), requires_grad=True),
        b2=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True))


def init_conv(out_ch: int, in_ch: int, k: int, rng: np.random.Generator, dtype,
              std: float | None = None) -> Tuple[Tensor, Tensor]:
    if std is None:
        std = float(np.sqrt(2.0 / (in_ch * k * k)))
    w = rng.normal(0.0, std, (out_ch, in_ch, k, k)).astype(dtype)
    return (Tensor(w, requires_grad=True),
            Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True))


def init_attention_sublayer(channels: int, window: int, dilation: int, heads: int,
                            rng: np.random.Generator, dtype) -> AttentionSublayer:
    return AttentionSublayer(
        cfg=AttentionConfig(window, dilation, heads, channels),
        proj=init_projections(channels, rng, dtype),
        bias=init_rel_pos_bias(window, heads, dtype),
        norm=init_layer_norm(channels, dtype))


def init_mlp_sublayer(channels: int, ratio: int, rng: np.random.Generator,
                      dtype) -> MlpSublayer:
    return MlpSublayer(mlp=init_mlp(channels, ratio, rng, dtype),
                       norm=init_layer_norm(channels, dtype))


def attention_sublayer_forward(z: Tensor, s: AttentionSublayer) -> Tensor:
    a = na_forward(layer_norm(z, s.norm.gamma, s.norm.beta, s.norm.eps),
                   s.cfg, s.proj, s.bias)
    return add(a, z)


def mlp_sublayer_forward(z: Tensor, s: MlpSublayer) -> Tensor:
    m = mlp_forward(layer_norm(z, s.norm.gamma, s.norm.beta, s.norm.eps),
                    s.mlp.w1, s.mlp.b1, s.mlp.w2, s.mlp.b2)
    return add(m, z)
