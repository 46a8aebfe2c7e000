"""Samples, the synthetic shapes dataset, manifest-backed data and augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from .functional import _separable, bilinear_weights
from .imageio import read_image, read_label
from .losses import IGNORE_INDEX
from .model import resize_labels

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class Sample(NamedTuple):
    image: np.ndarray  # float32 [3,H,W]; raw samples are in [0, 1]
    label: np.ndarray  # uint8 [H,W]; 255 = ignore


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator per (seed, index...) so workers never share a stream."""
    return np.random.default_rng([seed, *stream])


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_CLASSES = ("background", "rectangle", "disk", "triangle")
_CLASS_COLORS = {
    1: (0.85, 0.25, 0.20),
    2: (0.20, 0.80, 0.30),
    3: (0.25, 0.35, 0.90),
}


class SyntheticShapesDataset:
    """Rectangles, disks and triangles on a noisy background.

    Each shape sits in its own third of the image (slot order is random), so
    all four classes appear in every sample. Shape colours vary around a
    per-class hue; the background is a low-saturation gradient.
    """

    num_classes = 4

    def __init__(self, seed: int = 0, num_samples: int = 256, size: Tuple[int, int] = (64, 128)):
        self.seed = seed
        self.num_samples = num_samples
        self.size = tuple(size)

    def __len__(self) -> int:
        return self.num_samples

    def __getitem__(self, index: int) -> Sample:
        if not 0 <= index < self.num_samples:
            raise IndexError(index)
        rng = sample_rng(self.seed, index)
        h, w = self.size
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

        gray = rng.uniform(0.25, 0.65)
        base = gray + rng.uniform(-0.08, 0.08, size=3)
        tilt = rng.uniform(-0.15, 0.15, size=2)
        image = base[:, None, None] + tilt[0] * (yy / h - 0.5) + tilt[1] * (xx / w - 0.5)
        label = np.zeros((h, w), np.uint8)

        slot_w = w / 3
        for slot, cls in zip(rng.permutation(3), (1, 2, 3)):
            cx = (slot + 0.5) * slot_w + rng.uniform(-0.15, 0.15) * slot_w
            cy = h / 2 + rng.uniform(-0.2, 0.2) * h
            if cls == 1:
                hw, hh = rng.uniform(7, 15), rng.uniform(6, 14)
                mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
            elif cls == 2:
                r = rng.uniform(7, 14)
                mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
            else:
                mask = _triangle_mask(xx, yy, cx, cy, rng.uniform(9, 16), rng.uniform(0, 2 * np.pi))
            color = np.clip(np.array(_CLASS_COLORS[cls]) + rng.uniform(-0.15, 0.15, size=3), 0, 1)
            image[:, mask] = color[:, None]
            label[mask] = cls

        image += rng.normal(0, 0.04, size=image.shape)
        return Sample(np.clip(image, 0, 1).astype(np.float32), label)


def _triangle_mask(xx, yy, cx, cy, radius, angle):
    pts = [(cx + radius * np.cos(angle + k * 2 * np.pi / 3), cy + radius * np.sin(angle + k * 2 * np.pi / 3))
           for k in range(3)]
    signs = []
    for (x0, y0), (x1, y1) in zip(pts, pts[1:] + pts[:1]):
        signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0)
    return (signs[0] == signs[1]) & (signs[1] == signs[2])


# ---------------------------------------------------------------------------
# on-disk data
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    label: str
    prediction: Optional[str] = None


def read_manifest(path) -> List[ManifestEntry]:
    """Lines of ``image<TAB>label[<TAB>prediction]``; relative paths resolve against the manifest."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated paths")
            cols = [c if os.path.isabs(c) else os.path.join(root, c) for c in cols]
            entries.append(ManifestEntry(*cols))
    return entries


class ManifestDataset:
    def __init__(self, path):
        self.entries = read_manifest(path)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> Sample:
        e = self.entries[index]
        rgb = read_image(e.image)
        return Sample(rgb_to_chw(rgb), read_label(e.label))


def rgb_to_chw(rgb: np.ndarray) -> np.ndarray:
    if rgb.ndim == 2:
        rgb = np.repeat(rgb[..., None], 3, axis=-1)
    return (rgb.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    scale_range: Tuple[float, float] = (1.0, 1.0)
    crop: Tuple[int, int] = (64, 128)  # (H, W)
    hflip_prob: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    std: Tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        object.__setattr__(self, "crop", tuple(self.crop))
        object.__setattr__(self, "mean", tuple(self.mean))
        object.__setattr__(self, "std", tuple(self.std))
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"augment: invalid scale range {self.scale_range}")
        if self.crop[0] % 32 or self.crop[1] % 32:
            raise ValueError(f"augment: crop {self.crop} must be divisible by 32")


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [C,H,W] float array (same sampling as the model)."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    mh = bilinear_weights(h, out_h, image.dtype)
    mw = bilinear_weights(w, out_w, image.dtype)
    return _separable(image[None], mh, mw)[0]


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, :, ::-1].copy(), sample.label[:, ::-1].copy())


def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, np.float32)[:, None, None]
    s = np.asarray(std, np.float32)[:, None, None]
    return ((image - m) / s).astype(np.float32)


def _jitter(image: np.ndarray, b: float, c: float, s: float) -> np.ndarray:
    weights = np.array([0.299, 0.587, 0.114], np.float32)[:, None, None]
    out = image * b
    gray_mean = (out * weights).sum(axis=0).mean()
    out = (out - gray_mean) * c + gray_mean
    gray = (out * weights).sum(axis=0, keepdims=True)
    out = gray + (out - gray) * s
    return np.clip(out, 0, 1)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """scale -> pad -> crop -> hflip -> colour jitter -> normalize.

    Geometry is applied identically to image (bilinear) and label (nearest).
    Padding uses the normalization mean for the image, so it becomes 0, and
    the ignore index for the label.
    """
    image, label = sample.image, sample.label
    h, w = label.shape
    scale = rng.uniform(*cfg.scale_range)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    image = resize_image(image, nh, nw)
    label = resize_labels(label, nh, nw)

    ch, cw = cfg.crop
    ph, pw = max(ch - nh, 0), max(cw - nw, 0)
    valid = np.ones((nh, nw), bool)
    if ph or pw:
        image = np.concatenate([
            np.pad(image[i], ((0, ph), (0, pw)), constant_values=cfg.mean[i])[None] for i in range(image.shape[0])
        ])
        label = np.pad(label, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
        valid = np.pad(valid, ((0, ph), (0, pw)), constant_values=False)

    top = int(rng.integers(0, label.shape[0] - ch + 1))
    left = int(rng.integers(0, label.shape[1] - cw + 1))
    image = image[:, top:top + ch, left:left + cw]
    label = label[top:top + ch, left:left + cw]
    valid = valid[top:top + ch, left:left + cw]

    if rng.random() < cfg.hflip_prob:
        image, label, valid = image[:, :, ::-1], label[:, ::-1], valid[:, ::-1]

    factors = [rng.uniform(1 - m, 1 + m) for m in (cfg.brightness, cfg.contrast, cfg.saturation)]
    if any(f != 1.0 for f in factors):
        jittered = _jitter(image, *factors)
        pad_value = np.asarray(cfg.mean, np.float32)[:, None, None]
        image = np.where(valid[None], jittered, pad_value)

    return Sample(normalize(image, cfg.mean, cfg.std), np.ascontiguousarray(label))
