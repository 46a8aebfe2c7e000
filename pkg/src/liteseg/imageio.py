"""8-bit PNG / PPM / PGM reading and writing, plus mask palettes."""

from __future__ import annotations

import colorsys
from typing import Optional

import numpy as np
from PIL import Image


class UnsupportedImageError(ValueError):
    pass


_EIGHT_BIT = {"L", "P", "RGB", "RGBA"}

# Cityscapes train-id colours for the first 19 classes
_BASE_PALETTE = [
    (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
    (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
    (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
    (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
]


def _open(path) -> Image.Image:
    img = Image.open(path)
    if img.mode not in _EIGHT_BIT:
        raise UnsupportedImageError(f"{path}: unsupported pixel format {img.mode!r}; only 8-bit images are handled")
    return img


def read_image(path) -> np.ndarray:
    """RGB uint8 array [H,W,3]."""
    img = _open(path)
    return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()


def read_label(path) -> np.ndarray:
    """Single-channel uint8 label map [H,W]; palette images yield their indices."""
    img = _open(path)
    if img.mode not in ("L", "P"):
        raise UnsupportedImageError(f"{path}: label maps must be single-channel, got {img.mode!r}")
    return np.asarray(img, dtype=np.uint8).copy()


def write_image(path, pixels: np.ndarray) -> None:
    """Write [H,W] or [H,W,3] uint8; format follows the file extension."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise UnsupportedImageError(f"only uint8 pixels can be written, got {pixels.dtype}")
    if pixels.ndim == 2:
        Image.fromarray(pixels, mode="L").save(path)
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        Image.fromarray(pixels, mode="RGB").save(path)
    else:
        raise UnsupportedImageError(f"cannot write array of shape {pixels.shape}")


def make_palette(num_classes: int) -> np.ndarray:
    """Distinct RGB colours, [K,3] uint8."""
    colors = list(_BASE_PALETTE[:num_classes])
    extra = num_classes - len(colors)
    for i in range(extra):
        r, g, b = colorsys.hsv_to_rgb((i * 0.618034) % 1.0, 0.65 + 0.35 * (i % 2), 0.95 - 0.3 * ((i // 2) % 2))
        colors.append((int(r * 255), int(g * 255), int(b * 255)))
    pal = np.array(colors, dtype=np.uint8).reshape(-1, 3)
    return pal


def colorize(labels: np.ndarray, palette: np.ndarray, ignore_color=(0, 0, 0)) -> np.ndarray:
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    valid = labels < len(palette)
    out[valid] = palette[labels[valid]]
    out[~valid] = ignore_color
    return out


def write_label(path, labels: np.ndarray, palette: Optional[np.ndarray] = None) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise UnsupportedImageError("label values must fit in 8 bits")
    labels = labels.astype(np.uint8)
    write_image(path, colorize(labels, palette) if palette is not None else labels)
