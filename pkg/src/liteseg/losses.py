"""Pixel-wise cross entropy with online hard example mining."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .functional import note_branch
from .tensor import ShapeError, Tensor

IGNORE_INDEX = 255


@dataclass(frozen=True)
class OhemConfig:
    prob_threshold: float = 0.7
    min_kept: Optional[int] = None  # None -> pixels in batch // 16
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not 0 < self.prob_threshold <= 1:
            raise ValueError(f"ohem: prob_threshold must lie in (0, 1], got {self.prob_threshold}")
        if self.min_kept is not None and self.min_kept < 1:
            raise ValueError("ohem: min_kept must be positive")


class EmptyBatchError(ValueError):
    """Every pixel in the batch carries the ignore label."""


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def pixel_cross_entropy(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Per-pixel CE in float64 plus the valid mask; ignored pixels get 0."""
    logp = _log_softmax(logits)
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    return np.where(valid, -picked, 0.0), valid, logp


def ohem_cross_entropy(logits: Tensor, labels: np.ndarray, cfg: OhemConfig = OhemConfig()) -> Tensor:
    """Mean CE over the kept pixels.

    A valid pixel is kept when its true-class probability is below
    ``prob_threshold``. If fewer than ``min_kept`` qualify, the ``min_kept``
    largest-loss valid pixels are kept instead.
    """
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"ohem: labels {labels.shape} do not match logits {logits.shape}")
    bad = (labels != cfg.ignore_index) & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"ohem: labels outside [0, {k}) and != {cfg.ignore_index}")
    min_kept = cfg.min_kept if cfg.min_kept is not None else max(1, labels.size // 16)
    if min_kept > labels.size:
        raise ValueError(f"ohem: min_kept {min_kept} exceeds the {labels.size} pixels in the batch")

    ce, valid, logp = pixel_cross_entropy(logits.data, labels, cfg.ignore_index)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyBatchError("ohem: every pixel is ignored; nothing to optimize")
    flat_ce = ce.reshape(-1)
    flat_valid = valid.reshape(-1)
    prob = np.exp(-flat_ce)
    keep = flat_valid & (prob < cfg.prob_threshold)
    if keep.sum() < min_kept:
        order = np.argsort(np.where(flat_valid, -flat_ce, np.inf), kind="stable")
        keep = np.zeros_like(keep)
        keep[order[:min(min_kept, n_valid)]] = True
    note_branch(keep)
    n_kept = int(keep.sum())
    loss = flat_ce[keep].sum() / n_kept
    keep = keep.reshape(n, h, w)

    def backward(g):
        # d CE / d logits = softmax - onehot, averaged over kept pixels
        grad = np.exp(logp)
        idx = np.where(keep, labels, 0).astype(np.int64)[:, None]
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1, axis=1)
        grad *= keep[:, None] * (float(g) / n_kept)
        return (grad.astype(logits.dtype),)

    return Tensor.from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "ohem_cross_entropy")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Plain mean CE over non-ignored pixels (OHEM with mining disabled)."""
    labels = np.asarray(labels)
    n_valid = int((labels != ignore_index).sum())
    return ohem_cross_entropy(logits, labels, OhemConfig(1.0, max(1, n_valid), ignore_index))
