"""Five-stage stride-2 Conv-BN-ReLU encoder.

Stands in for the STDC backbones: each stage halves the resolution once and
then applies residual 3x3 Conv-BN-ReLU blocks at constant width.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

import numpy as np

from . import functional as F
from .blocks import ConfigError
from .nn import ConvBNReLU, Module
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: Tuple[int, ...]
    blocks_per_stage: Tuple[int, ...]
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_channels) != 5 or len(self.blocks_per_stage) != 5:
            raise ConfigError("encoder: exactly 5 stages are required")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1 or self.input_channels < 1:
            raise ConfigError("encoder: widths and block counts must be positive")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"encoder: stage widths must be nondecreasing, got {self.stage_channels}")


ENCODER_PRESETS = {
    "encoder-tiny": EncoderConfig((16, 32, 64, 128, 256), (1, 1, 1, 1, 1)),
    # STDC1 / STDC2 widths; block counts put T near 9M and B near 12.5M parameters
    "encoder-T": EncoderConfig((32, 64, 256, 512, 1024), (1, 1, 2, 2, 1)),
    "encoder-B": EncoderConfig((32, 64, 256, 512, 1024), (1, 1, 4, 3, 1)),
}


def encoder_config(name: str) -> EncoderConfig:
    try:
        return ENCODER_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown encoder preset {name!r}; choose from {sorted(ENCODER_PRESETS)}") from None


class FeaturePyramid(NamedTuple):
    f2: Tensor
    f4: Tensor
    f8: Tensor
    f16: Tensor
    f32: Tensor


class ResidualBlock(Module):
    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.body = ConvBNReLU(channels, channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return F.add(x, self.body(x))


class Stage(Module):
    def __init__(self, in_channels: int, out_channels: int, blocks: int, rng=None):
        super().__init__()
        self.down = ConvBNReLU(in_channels, out_channels, 3, stride=2, rng=rng)
        self.blocks = [ResidualBlock(out_channels, rng=rng) for _ in range(blocks - 1)]

    def forward(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for block in self.blocks:
            x = block(x)
        return x


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        widths = (cfg.input_channels,) + cfg.stage_channels
        self.stages: List[Stage] = [
            Stage(widths[i], widths[i + 1], cfg.blocks_per_stage[i], rng=rng) for i in range(5)
        ]

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"encoder: expected [N,{self.cfg.input_channels},H,W] input, got {image.shape}")
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise ShapeError(f"encoder: input size {h}x{w} must be divisible by 32; pad or resize the image first")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)


def encoder_forward(image: Tensor, encoder: Encoder) -> FeaturePyramid:
    return encoder(image)
