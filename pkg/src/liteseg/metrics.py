"""Confusion-matrix bookkeeping and mIoU."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Optional, Tuple

import numpy as np

from .losses import IGNORE_INDEX


class ConfusionMatrix:
    """K x K counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, ignore_index: int = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
        k = self.num_classes
        keep = gt != self.ignore_index
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= k):
            raise ValueError(f"ground truth contains labels outside [0, {k}) and != {self.ignore_index}")
        if p.size and (p.min() < 0 or p.max() >= k):
            raise ValueError(f"prediction contains labels outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    return cm.accumulate(pred, gt)


def miou(cm: ConfusionMatrix) -> Tuple[float, np.ndarray]:
    """Mean IoU over classes with a non-empty union; per-class IoU is NaN otherwise."""
    c = cm.counts
    tp = np.diag(c).astype(np.float64)
    union = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    present = union > 0
    if not present.any():
        raise ValueError("miou: every class has an empty union")
    iou = np.full(cm.num_classes, np.nan)
    iou[present] = tp[present] / union[present]
    return float(iou[present].mean()), iou


def worker_count(requested: Optional[int] = None) -> int:
    """Requested worker count capped by LITESEG_THREADS."""
    n = requested if requested else (os.cpu_count() or 1)
    cap = os.environ.get("LITESEG_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def evaluate_pairs(
    pairs: Iterable, num_classes: int, predict_fn: Callable, workers: Optional[int] = None
) -> ConfusionMatrix:
    """Accumulate ``predict_fn(item) -> (pred, gt)`` over ``pairs``.

    Each worker owns a private matrix; integer merging keeps the result exact
    and independent of the worker count.
    """
    items = list(pairs)
    n = min(worker_count(workers), max(1, len(items)))
    shards = [items[i::n] for i in range(n)]

    def run(shard):
        cm = ConfusionMatrix(num_classes)
        for item in shard:
            pred, gt = predict_fn(item)
            cm.accumulate(pred, gt)
        return cm

    total = ConfusionMatrix(num_classes)
    if n == 1:
        return total.merge(run(shards[0]))
    with ThreadPoolExecutor(max_workers=n) as pool:
        for cm in pool.map(run, shards):
            total.merge(cm)
    return total
