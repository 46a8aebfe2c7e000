"""PP-LiteSeg assembly: encoder -> SPPM -> two UAFMs -> seg head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from . import functional as F
from .blocks import SPPM, UAFM, AttentionKind, ConfigError, SegHead
from .encoder import Encoder, encoder_config
from .nn import ConvBNReLU, Module
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    """Model hyperparameters. ``decoder_channels`` are listed low -> high level."""

    encoder: str = "encoder-tiny"
    decoder_channels: Tuple[int, int, int] = (16, 32, 64)
    num_classes: int = 4
    sppm_inter_channels: int = 64
    sppm_out_channels: int = 64
    attention: AttentionKind = AttentionKind.SPATIAL
    use_sppm: bool = True
    summation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        self.validate()

    def validate(self) -> None:
        enc = encoder_config(self.encoder)
        dc = self.decoder_channels
        if len(dc) != 3 or not dc[0] < dc[1] < dc[2]:
            raise ConfigError(f"decoder: channels must be 3 strictly increasing values, got {dc}")
        if self.num_classes < 1:
            raise ConfigError("seg_head: num_classes must be positive")
        if self.sppm_out_channels != dc[2]:
            raise ConfigError(
                f"sppm: out_channels {self.sppm_out_channels} must equal decoder_channels[2] = {dc[2]}"
            )
        if self.use_sppm and (
            self.sppm_inter_channels >= enc.stage_channels[4] or self.sppm_out_channels >= enc.stage_channels[4]
        ):
            raise ConfigError(
                f"sppm: inter/out channels must be smaller than the encoder output width {enc.stage_channels[4]}"
            )
        if self.summation and self.attention is not AttentionKind.NONE:
            raise ConfigError("uafm: summation fusion requires attention 'none'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        d["attention"] = self.attention.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "preset" in d:
            base = PRESETS[d.pop("preset")]
            return replace(base, **d)
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


PRESETS: Dict[str, ModelConfig] = {
    "pp_liteseg_t": ModelConfig("encoder-T", (32, 64, 128), 19, 128, 128),
    "pp_liteseg_b": ModelConfig("encoder-B", (64, 96, 128), 19, 128, 128),
    "tiny": ModelConfig(),
}


class PPLiteSeg(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        enc_cfg = encoder_config(cfg.encoder)
        widths = enc_cfg.stage_channels
        dc = cfg.decoder_channels
        self.cfg = cfg
        self.encoder = Encoder(enc_cfg, rng=rng)
        if cfg.use_sppm:
            self.context = SPPM(widths[4], cfg.sppm_inter_channels, cfg.sppm_out_channels, rng=rng)
        else:
            # ablation bypass: plain projection to the top decoder width
            self.context = ConvBNReLU(widths[4], dc[2], 1, rng=rng)
        self.fuse16 = UAFM(dc[2], widths[3], dc[1], cfg.attention, cfg.summation, rng=rng)
        self.fuse8 = UAFM(dc[1], widths[2], dc[0], cfg.attention, cfg.summation, rng=rng)
        self.head = SegHead(dc[0], dc[0], cfg.num_classes, rng=rng)

    def features(self, image: Tensor) -> dict:
        """All intermediate features by name (pyramid, context, fused)."""
        pyr = self.encoder(image)
        ctx = self.context(pyr.f32)
        x16 = self.fuse16(ctx, pyr.f16)
        x8 = self.fuse8(x16, pyr.f8)
        return {"pyramid": pyr, "context": ctx, "fused16": x16, "fused8": x8}

    def forward(self, image: Tensor) -> Tensor:
        feats = self.features(image)
        h, w = image.shape[2:]
        return self.head(feats["fused8"], h, w)


def build_model(cfg: ModelConfig, seed: int = 0) -> PPLiteSeg:
    return PPLiteSeg(cfg, seed=seed)


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel class index over axis 1; ties go to the lowest index."""
    return logits.argmax(axis=1).astype(np.int64)


def predict(model: PPLiteSeg, image: Tensor) -> np.ndarray:
    """Eval-mode label map [N,H,W]."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits = model(image)
    finally:
        model.train(was_training)
    return argmax_labels(logits.data)


def resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of [..., H, W] integer maps (src = floor(dst * in/out))."""
    h, w = labels.shape[-2:]
    if (h, w) == (out_h, out_w):
        return labels.copy()
    rows = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
    cols = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def infer_resized(model: PPLiteSeg, image: np.ndarray, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Resize a normalized [3,H,W] image to ``size``, predict, resize labels back to H x W."""
    h, w = image.shape[-2:]
    x = Tensor(image[None])
    if size is not None and tuple(size) != (h, w):
        with no_grad():
            x = F.resize_bilinear(x, *size)
    labels = predict(model, x)[0]
    return resize_labels(labels, h, w)


def model_input_size(h: int, w: int) -> Tuple[int, int]:
    """Closest size with both sides divisible by 32."""
    return max(32, int(round(h / 32)) * 32), max(32, int(round(w / 32)) * 32)
