"""Latency / FPS measurement: resize input -> infer -> resize prediction, all timed."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import functional as F
from .model import PPLiteSeg, argmax_labels, resize_labels
from .tensor import Tensor, no_grad


@dataclass
class BenchReport:
    resolution: Tuple[int, int]
    original_size: Tuple[int, int]
    warmup_runs: int
    timed_runs: int
    per_run_ms: List[float] = field(default_factory=list)
    includes_resize: bool = True

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.per_run_ms))

    @property
    def min_ms(self) -> float:
        return float(np.min(self.per_run_ms))

    @property
    def max_ms(self) -> float:
        return float(np.max(self.per_run_ms))

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_ms=self.mean_ms, min_ms=self.min_ms, max_ms=self.max_ms, fps=self.fps)
        d["resolution"] = list(self.resolution)
        d["original_size"] = list(self.original_size)
        return d


def bench(
    model: PPLiteSeg,
    resolution: Tuple[int, int],
    warmup: int = 10,
    runs: int = 50,
    original_size: Optional[Tuple[int, int]] = None,
    seed: int = 0,
) -> BenchReport:
    """Single-image latency at ``resolution`` (H, W) with a fixed random input.

    Each timed run resizes the original-size image to ``resolution``, runs
    the model in eval mode, takes the argmax and resizes the label map back.
    """
    if warmup < 1 or runs < 3:
        raise ValueError("bench: need warmup >= 1 and runs >= 3")
    res = tuple(int(v) for v in resolution)
    orig = tuple(int(v) for v in (original_size or res))
    image = Tensor(np.random.default_rng(seed).standard_normal((1, 3) + orig).astype(np.float32))
    model.eval()

    def once() -> np.ndarray:
        x = F.resize_bilinear(image, *res)
        labels = argmax_labels(model(x).data)
        return resize_labels(labels, *orig)

    report = BenchReport(res, orig, warmup, runs)
    with no_grad():
        for _ in range(warmup):
            once()
        for _ in range(runs):
            t0 = time.perf_counter()
            once()
            report.per_run_ms.append((time.perf_counter() - t0) * 1000.0)
    return report
