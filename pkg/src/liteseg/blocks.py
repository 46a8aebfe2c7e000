"""UAFM fusion (spatial / channel attention), SPPM context pooling and the seg head."""

from __future__ import annotations

import enum
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import ShapeError, Tensor


class ConfigError(ValueError):
    """Inconsistent block or model configuration."""


class AttentionKind(str, enum.Enum):
    SPATIAL = "spatial"
    SPATIAL_NO_MAX = "spatial_nomax"
    CHANNEL = "channel"
    NONE = "none"


def _check_pair(f_up: Tensor, f_low: Tensor, name: str) -> None:
    if f_up.shape != f_low.shape:
        raise ShapeError(f"{name}: F_up {f_up.shape} and F_low {f_low.shape} must have equal shapes")


def spatial_features(f_up: Tensor, f_low: Tensor, use_max: bool = True) -> Tensor:
    """Channel-wise mean/max maps of both inputs stacked to [N,4,H,W] (or [N,2,H,W])."""
    _check_pair(f_up, f_low, "spatial_attention")
    parts = []
    for f in (f_up, f_low):
        mean, mx = F.channel_mean_max(f)
        parts.extend([mean, mx] if use_max else [mean])
    return F.concat(parts, axis=1)


def spatial_attention(f_up: Tensor, f_low: Tensor, conv: Conv2d, use_max: bool = True) -> Tensor:
    return F.sigmoid(conv(spatial_features(f_up, f_low, use_max)))


def channel_features(f_up: Tensor, f_low: Tensor) -> Tensor:
    """Global avg/max pooled inputs stacked to [N,4C,1,1]."""
    _check_pair(f_up, f_low, "channel_attention")
    parts = []
    for f in (f_up, f_low):
        parts.extend(F.spatial_avg_max_pool(f))
    return F.concat(parts, axis=1)


def channel_attention(f_up: Tensor, f_low: Tensor, conv: Conv2d) -> Tensor:
    return F.sigmoid(conv(channel_features(f_up, f_low)))


class UAFM(Module):
    """Fuses an upsampled deep feature with an encoder skip feature.

    ``alpha`` comes from the attention plugin and the output is
    ``F_up * alpha + F_low * (1 - alpha)``. When the incoming widths differ
    from ``channels`` a 1x1 Conv-BN-ReLU maps each side first.
    """

    def __init__(
        self,
        high_channels: int,
        low_channels: int,
        channels: int,
        attention: AttentionKind = AttentionKind.SPATIAL,
        summation: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        attention = AttentionKind(attention)
        if summation and attention is not AttentionKind.NONE:
            raise ConfigError("uafm: summation fusion is only available without attention")
        self.channels = channels
        self.attention = attention
        self.summation = summation
        self.high_proj = ConvBNReLU(high_channels, channels, 1, rng=rng) if high_channels != channels else None
        self.low_proj = ConvBNReLU(low_channels, channels, 1, rng=rng) if low_channels != channels else None
        if attention is AttentionKind.SPATIAL:
            self.attention_conv = Conv2d(4, 1, 3, padding=1, bias=True, rng=rng)
        elif attention is AttentionKind.SPATIAL_NO_MAX:
            self.attention_conv = Conv2d(2, 1, 3, padding=1, bias=True, rng=rng)
        elif attention is AttentionKind.CHANNEL:
            self.attention_conv = Conv2d(4 * channels, channels, 1, padding=0, bias=True, rng=rng)
        else:
            self.attention_conv = None

    def weight(self, f_up: Tensor, f_low: Tensor) -> Tensor:
        """Attention weight alpha: [N,1,H,W] spatial, [N,C,1,1] channel, or scalar 0.5."""
        kind = self.attention
        if kind is AttentionKind.SPATIAL:
            return spatial_attention(f_up, f_low, self.attention_conv)
        if kind is AttentionKind.SPATIAL_NO_MAX:
            return spatial_attention(f_up, f_low, self.attention_conv, use_max=False)
        if kind is AttentionKind.CHANNEL:
            return channel_attention(f_up, f_low, self.attention_conv)
        _check_pair(f_up, f_low, "uafm")
        return Tensor(np.full((1, 1, 1, 1), 0.5, dtype=f_up.dtype), dtype=f_up.dtype)

    def forward(self, f_high: Tensor, f_low: Tensor) -> Tensor:
        if self.high_proj is not None:
            f_high = self.high_proj(f_high)
        if self.low_proj is not None:
            f_low = self.low_proj(f_low)
        if f_high.shape[1] != self.channels or f_low.shape[1] != self.channels:
            raise ShapeError(
                f"uafm: expected {self.channels} channels, got high {f_high.shape} and low {f_low.shape}"
            )
        h, w = f_low.shape[2:]
        f_up = F.bilinear_upsample(f_high, h, w)
        if self.summation:
            return F.add(f_up, f_low)
        return F.blend(f_up, f_low, self.weight(f_up, f_low))


class SPPM(Module):
    """Pyramid pooling with bins 1/2/4, additive branch merge and a 3x3 fuse conv.

    Bins larger than the input are clamped to the input extent.
    """

    bins: Sequence[int] = (1, 2, 4)

    def __init__(self, in_channels: int, inter_channels: int, out_channels: int, rng=None):
        super().__init__()
        if inter_channels >= in_channels or out_channels >= in_channels:
            raise ConfigError(
                f"sppm: inter ({inter_channels}) and out ({out_channels}) channels must be "
                f"smaller than the input width {in_channels}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.branches = [ConvBNReLU(in_channels, inter_channels, 1, rng=rng) for _ in self.bins]
        self.fuse = ConvBNReLU(inter_channels, out_channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        total = None
        for b, branch in zip(self.bins, self.branches):
            # maps smaller than a bin (64x128 inputs give 2x4) pool at full resolution on that axis
            pooled = F.adaptive_avg_pool(x, min(b, h), min(b, w))
            y = F.bilinear_upsample(branch(pooled), h, w)
            total = y if total is None else F.add(total, y)
        return self.fuse(total)


class SegHead(Module):
    def __init__(self, in_channels: int, mid_channels: int, num_classes: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_classes = num_classes
        self.conv = ConvBNReLU(in_channels, mid_channels, 3, rng=rng)
        self.classifier = Conv2d(mid_channels, num_classes, 1, bias=True, rng=rng)

    def forward(self, x: Tensor, out_h: int, out_w: int) -> Tensor:
        return F.bilinear_upsample(self.classifier(self.conv(x)), out_h, out_w)
