"""Full pose model: backbone -> waterfall neck -> heatmap head.

Parameters are named by walking the dataclass tree in field order, which
makes the registry deterministic for checkpoints and the optimizer.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, Iterator, Tuple

import numpy as np

from .autodiff import DTYPES, Tensor, rng_from_seed
from .backbone import BackboneConfig, BackboneParams, backbone_forward, init_backbone
from .errors import ConfigurationError
from .head import HeadParams, head_forward, init_head
from .waterfall import (WaterfallConfig, WaterfallParams, init_waterfall,
                        waterfall_module_forward)


def walk_tensors(obj, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    """Yield (dotted name, tensor) over any nesting of dataclasses/lists/tuples."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from walk_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from walk_tensors(item, f"{prefix}.{i}")


class PoseModel:
    def __init__(self, backbone_cfg: BackboneConfig, waterfall_cfg: WaterfallConfig,
                 num_joints: int, input_hw: Tuple[int, int], precision: str = "f64",
                 seed: int = 0):
        if precision not in DTYPES:
            raise ConfigurationError(f"unknown precision {precision!r}")
        self.precision = precision
        self.input_hw = tuple(input_hw)
        self.num_joints = num_joints
        dtype = DTYPES[precision]
        rng = rng_from_seed(seed, stream=1)
        self.backbone = init_backbone(backbone_cfg, rng, dtype, input_hw)
        self.waterfall = init_waterfall(waterfall_cfg, backbone_cfg.stage_channels,
                                        backbone_cfg.llf_channels, rng, dtype)
        self.head = init_head(waterfall_cfg.out_channels, num_joints, rng, dtype)
        self._params = self._collect()

    def _collect(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for root_name, root in (("backbone", self.backbone),
                                ("waterfall", self.waterfall),
                                ("head", self.head)):
            for name, t in walk_tensors(root, root_name):
                params[name] = t
                t.name = name
        return params

    def named_parameters(self) -> Dict[str, Tensor]:
        return self._params

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self._params.values())

    def forward(self, img: Tensor) -> Tensor:
        pyramid = backbone_forward(img, self.backbone)
        f_maps = waterfall_module_forward(pyramid, self.waterfall)
        return head_forward(f_maps, self.head)

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def load_state(self, arrays: Dict[str, np.ndarray]):
        """Copy arrays into parameters; names and shapes must match exactly."""
        from .errors import CheckpointError
        mine = self._params
        missing = sorted(set(mine) - set(arrays))
        extra = sorted(set(arrays) - set(mine))
        if missing or extra:
            raise CheckpointError(
                f"parameter names mismatch (missing: {missing[:3]}, unexpected: {extra[:3]})")
        for name, t in mine.items():
            a = arrays[name]
            if tuple(a.shape) != tuple(t.shape):
                raise CheckpointError(
                    f"shape conflict for tensor '{name}': checkpoint {tuple(a.shape)} "
                    f"vs model {tuple(t.shape)}")
            t.data[...] = a.astype(t.data.dtype)
