"""Run configuration: model, optimizer, and data sections with JSON round trip.

Full-scale defaults mirror the reference training recipe (AdamW at 5e-4,
210 epochs with /10 decays at 170 and 200, batch 32); the desk-scale config
overrides them with a setup that overfits a small synthetic set in minutes.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .backbone import BackboneConfig
from .errors import ConfigurationError
from .synth import SynthSpec
from .waterfall import WaterfallConfig


@dataclass
class OptimConfig:
    algorithm: str = "adamw"
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 210
    decay_epochs: Tuple[int, ...] = (170, 200)
    batch_size: int = 32

    def __post_init__(self):
        if self.algorithm != "adamw":
            raise ConfigurationError(f"unsupported optimizer {self.algorithm!r}")
        if any(d >= self.epochs for d in self.decay_epochs):
            raise ConfigurationError(
                f"decay epochs {self.decay_epochs} must be < total epochs {self.epochs}")


@dataclass
class DataConfig:
    dataset_dir: Optional[str] = None
    synth: Optional[SynthSpec] = None
    input_hw: Tuple[int, int] = (384, 288)
    holdout_fraction: float = 0.2
    flip_augment: bool = False

    def __post_init__(self):
        h, w = self.input_hw
        if h % 32 or w % 32:
            raise ConfigurationError(f"input {h}x{w} must be divisible by 32")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ConfigurationError(f"bad holdout fraction {self.holdout_fraction}")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    waterfall: WaterfallConfig = field(default_factory=WaterfallConfig)
    num_joints: int = 17
    target_sigma: float = 2.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError(f"precision must be f32 or f64, got {self.precision!r}")


def desk_config(seed: int = 42) -> RunConfig:
    """Small model + synthetic data that overfits 50 images on a CPU in minutes.

    Dilations are capped at 3 because a 96x96 input gives 24x24 stride-4 maps
    and a window of 7 needs at least 7 * dilation pixels per side.
    """
    return RunConfig(
        model=ModelConfig(
            backbone=BackboneConfig(stage_channels=(16, 32, 64, 128),
                                    blocks_per_stage=(1, 1, 1, 1),
                                    stem_channels=16, llf_channels=64,
                                    llf_mid_channels=16, heads=(2, 2, 4, 4)),
            waterfall=WaterfallConfig(embed_channels=64,
                                      block_dilations=((2, 1), (3, 1), (3, 1), (3, 1)),
                                      heads=4, low_level_channels=64, out_channels=64),
            num_joints=17, target_sigma=2.0),
        optim=OptimConfig(lr=2e-3, weight_decay=1e-4, epochs=150,
                          decay_epochs=(110, 135), batch_size=5),
        data=DataConfig(synth=SynthSpec(num_images=50, image_size=(96, 96), seed=seed),
                        input_hw=(96, 96), holdout_fraction=0.0),
        seed=seed, precision="f32")


# ---------------------------------------------------------------------------
# JSON (de)serialization for the nested dataclasses


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, value):
    if value is None:
        return None
    origin = typing.get_origin(cls)
    if origin in (tuple, list):
        args = typing.get_args(cls)
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v) for v in value)
        if origin is tuple:
            return tuple(_build(a, v) for a, v in zip(args, value))
        return [_build(args[0], v) for v in value]
    if origin is typing.Union:
        args = [a for a in typing.get_args(cls) if a is not type(None)]
        return _build(args[0], value)
    if dataclasses.is_dataclass(cls):
        hints = typing.get_type_hints(cls)
        kwargs = {f.name: _build(hints[f.name], value[f.name])
                  for f in dataclasses.fields(cls) if f.name in value}
        return cls(**kwargs)
    return value


def from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d)


def load_config(path: Path | str) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
    return from_dict(doc)


def save_config(cfg: RunConfig, path: Path | str):
    Path(path).write_text(json.dumps(to_dict(cfg), indent=1))
