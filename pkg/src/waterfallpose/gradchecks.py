"""Finite-difference verification suites, runnable from the CLI.

Every check runs in 64-bit and reports the worst relative error between the
analytic gradient and central differences against its threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .autodiff import Tensor, finite_diff_check, parameter, rng_from_seed
from . import ops
from .attention import AttentionConfig, init_projections, init_rel_pos_bias, na_forward
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .errors import ConfigurationError
from .head import head_forward, init_head, mse_loss_visible
from .layers import init_mlp
from .waterfall import (WaterfallConfig, block_forward, init_block, init_waterfall,
                        waterfall_module_forward)
from .model import walk_tensors

SCOPES = ("primitive", "attention", "wtb", "wtm", "full")

PRIMITIVE_THRESHOLD = 1e-6
ATTENTION_THRESHOLD = 1e-5
BLOCK_THRESHOLD = 1e-4
MODULE_THRESHOLD = 1e-4
HEAD_THRESHOLD = 1e-5


@dataclass
class CheckResult:
    component: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def _sq(t: Tensor) -> Tensor:
    return ops.sum_all(ops.mul(t, t))


def primitive_checks() -> List[CheckResult]:
    rng = rng_from_seed(1234)
    results = []

    def check(name, f, x, thr=PRIMITIVE_THRESHOLD):
        results.append(CheckResult(name, finite_diff_check(f, x), thr))

    for shape in ((1, 2, 5, 5), (2, 3, 4, 6), (1, 4, 3, 3)):
        x = parameter(rng.normal(size=shape))
        w = parameter(rng.normal(size=(3, shape[1], 3, 3)) * 0.5)
        b = parameter(rng.normal(size=3) * 0.1)
        check(f"conv2d/x{shape}", lambda t: _sq(ops.conv2d(t, w, b, 1, 1)), x)
        check(f"conv2d/w{shape}", lambda t: _sq(ops.conv2d(x, t, b, 1, 1)), w)
        check(f"conv2d/b{shape}", lambda t: _sq(ops.conv2d(x, w, t, 1, 1)), b)
    xs = parameter(rng.normal(size=(1, 2, 4, 5)))
    check("conv2d/stride2", lambda t: _sq(ops.conv2d(t, parameter(np.ones((1, 2, 3, 3))),
                                                     parameter(np.zeros(1)), 2, 1)), xs)

    for shape, out_hw in (((1, 2, 3, 3), (5, 7)), ((2, 1, 4, 4), (8, 8)), ((1, 3, 2, 5), (4, 5))):
        x = parameter(rng.normal(size=shape))
        check(f"bilinear_upsample/{shape}", lambda t: _sq(ops.bilinear_upsample(t, *out_hw)), x)

    for shape in ((1, 4, 3, 3), (2, 6, 2, 2), (1, 3, 5, 4)):
        x = parameter(rng.normal(size=shape))
        g = parameter(rng.normal(size=shape[1]))
        bb = parameter(rng.normal(size=shape[1]))
        check(f"layer_norm/x{shape}", lambda t: _sq(ops.layer_norm(t, g, bb)), x)
        check(f"layer_norm/gamma{shape}", lambda t: _sq(ops.layer_norm(x, t, bb)), g)
        check(f"layer_norm/beta{shape}", lambda t: _sq(ops.layer_norm(x, g, t)), bb)

    for shape in ((3, 5), (2, 2, 7), (4,)):
        x = parameter(rng.normal(size=shape))
        check(f"softmax_lastdim/{shape}", lambda t: _sq(ops.softmax_lastdim(t)), x)

    for shapes in (((1, 2, 3, 3), (1, 4, 3, 3)), ((2, 1, 2, 2), (2, 1, 2, 2), (2, 3, 2, 2))):
        tensors = [parameter(rng.normal(size=s)) for s in shapes]
        check(f"concat_channels/{len(shapes)}",
              lambda t: _sq(ops.concat_channels([t] + tensors[1:])), tensors[0])

    for shape, k, s, p in (((1, 2, 5, 5), 3, 1, 1), ((2, 1, 6, 6), 3, 2, 1), ((1, 3, 7, 7), 5, 1, 2)):
        x = parameter(rng.normal(size=shape))
        check(f"depthwise_avg_pool/{shape}",
              lambda t, k=k, s=s, p=p: _sq(ops.depthwise_avg_pool(t, k, s, p)), x)

    for shape in ((1, 3, 2, 2), (2, 4, 3, 3), (1, 6, 1, 5)):
        c = shape[1]
        x = parameter(rng.normal(size=shape))
        mlp = init_mlp(c, 2, rng, np.float64)
        mlp.w2.data[:] = rng.normal(size=mlp.w2.shape) * 0.2
        mlp.b2.data[:] = rng.normal(size=mlp.b2.shape) * 0.1
        check(f"mlp_forward/x{shape}",
              lambda t: _sq(ops.mlp_forward(t, mlp.w1, mlp.b1, mlp.w2, mlp.b2)), x)
        check(f"mlp_forward/w1{shape}",
              lambda t: _sq(ops.mlp_forward(x, t, mlp.b1, mlp.w2, mlp.b2)), mlp.w1)
        check(f"mlp_forward/w2{shape}",
              lambda t: _sq(ops.mlp_forward(x, mlp.w1, mlp.b1, t, mlp.b2)), mlp.w2)

    for shape in ((2, 3), (1, 5, 4), (3, 2, 2, 2)):
        x = parameter(rng.normal(size=shape))
        check(f"gelu/{shape}", lambda t: _sq(ops.gelu(t)), x)

    x = parameter(rng.normal(size=(2, 3, 4, 4)))
    tgt = rng.normal(size=(2, 3, 4, 4))
    msk = np.array([[1, 0, 1], [1, 1, 0]], dtype=np.float64)
    check("masked_mse", lambda t: ops.masked_mse(t, tgt, msk), x)

    for shape in ((1, 3, 2, 2), (2, 2, 3, 3), (4, 1, 1, 6)):
        c = shape[1]
        x = parameter(rng.normal(size=shape))
        w = parameter(rng.normal(size=(5, c)) * 0.3)
        b = parameter(rng.normal(size=5) * 0.1)
        check(f"linear_channels/{shape}", lambda t: _sq(ops.linear_channels(t, w, b)), x)
        check(f"linear_channels/w{shape}", lambda t: _sq(ops.linear_channels(x, t, b)), w)
    return results


def attention_checks() -> List[CheckResult]:
    rng = rng_from_seed(77)
    results = []
    for dilation in (1, 2):
        cfg = AttentionConfig(window=3, dilation=dilation, heads=2, channels=8)
        size = 5 if dilation == 1 else 6
        x = parameter(rng.normal(size=(1, 8, size, size)))
        proj = init_projections(8, rng)
        proj.wo.data[:] = rng.normal(0, 0.2, (8, 8))
        bias = init_rel_pos_bias(3, 2)
        bias.table.data[:] = rng.normal(0, 0.3, bias.table.shape)

        def f(t, cfg=cfg, proj=proj, bias=bias):
            return _sq(na_forward(t, cfg, proj, bias))

        results.append(CheckResult(f"na_forward/x d={dilation}",
                                   finite_diff_check(f, x), ATTENTION_THRESHOLD))
        results.append(CheckResult(f"na_forward/bias d={dilation}",
                                   finite_diff_check(lambda t, x=x, cfg=cfg, proj=proj,
                                                     bias=bias: _sq(na_forward(x, cfg, proj, bias)),
                                                     bias.table), ATTENTION_THRESHOLD))
    return results


def _minimal_block():
    rng = rng_from_seed(88)
    cfg = WaterfallConfig(embed_channels=8, block_dilations=((2, 1), (2, 1), (2, 1), (2, 1)),
                          window=3, heads=2, mlp_ratio=2, low_level_channels=8, out_channels=8)
    bp = init_block(cfg, (2, 1), rng, np.float64)
    # randomize the zero-initialized output projections so gradients are generic
    for t in walk_tensors(bp):
        if t[1].data.ndim >= 2 and not t[1].data.any():
            t[1].data[:] = rng.normal(0, 0.1, t[1].shape)
    return cfg, bp


def block_checks() -> List[CheckResult]:
    rng = rng_from_seed(99)
    _, bp = _minimal_block()
    x = parameter(rng.normal(size=(1, 8, 6, 6)))
    err = finite_diff_check(lambda t: _sq(block_forward(t, bp)), x)
    return [CheckResult("waterfall_block/x", err, BLOCK_THRESHOLD)]


def module_checks() -> List[CheckResult]:
    from .backbone import FeaturePyramid
    rng = rng_from_seed(111)
    cfg = WaterfallConfig(embed_channels=8, block_dilations=((2, 1), (2, 1), (2, 1), (2, 1)),
                          window=3, heads=2, mlp_ratio=2, low_level_channels=8, out_channels=8)
    params = init_waterfall(cfg, (2, 2, 2, 2), 2, rng, np.float64)
    for _, t in walk_tensors(params):
        if t.data.ndim >= 2 and not t.data.any():
            t.data[:] = rng.normal(0, 0.1, t.shape)
    f1 = parameter(rng.normal(size=(1, 2, 16, 16)))
    rest = [Tensor(rng.normal(size=(1, 2, 16 // f, 16 // f))) for f in (2, 4, 8)]
    f_llf = Tensor(rng.normal(size=(1, 2, 16, 16)))

    def f(t):
        pyr = FeaturePyramid(t, rest[0], rest[1], rest[2], f_llf)
        return _sq(waterfall_module_forward(pyr, params))

    err = finite_diff_check(f, f1)
    return [CheckResult("waterfall_module/f1", err, MODULE_THRESHOLD)]


def head_checks() -> List[CheckResult]:
    rng = rng_from_seed(222)
    head = init_head(6, 3, rng, np.float64)
    head.out_w.data[:] = rng.normal(0, 0.2, head.out_w.shape)
    x = parameter(rng.normal(size=(1, 6, 4, 4)))
    tgt = rng.normal(size=(1, 3, 4, 4))
    msk = np.array([[1.0, 0.0, 1.0]])

    def f(t):
        return mse_loss_visible(head_forward(t, head), tgt, msk)

    err = finite_diff_check(f, x)
    errs = [CheckResult("head+loss/x", err, HEAD_THRESHOLD)]
    errs.append(CheckResult("head+loss/conv_w",
                            finite_diff_check(lambda t: f(x), head.conv_w), HEAD_THRESHOLD))
    return errs


def run_scope(scope: str) -> List[CheckResult]:
    if scope not in SCOPES:
        raise ConfigurationError(f"unknown gradcheck scope {scope!r}")
    suites: dict[str, Callable[[], List[CheckResult]]] = {
        "primitive": primitive_checks,
        "attention": attention_checks,
        "wtb": block_checks,
        "wtm": module_checks,
    }
    if scope == "full":
        results = []
        for fn in (primitive_checks, attention_checks, block_checks, module_checks,
                   head_checks):
            results.extend(fn())
        return results
    return suites[scope]()
