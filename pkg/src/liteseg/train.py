"""Training loop and its JSON configuration."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from .data import AugmentConfig, ManifestDataset, SyntheticShapesDataset, augment, normalize, sample_rng
from .losses import OhemConfig, ohem_cross_entropy
from .metrics import ConfusionMatrix, worker_count
from .model import ModelConfig, PPLiteSeg, predict
from .optim import SGD, ScheduleConfig, poly_lr
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, iteration: int, detail: str = "loss is not finite"):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    iters: int = 500
    batch_size: int = 8
    seed: int = 0
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    warmup_iters: Optional[int] = None  # None -> 1% of iters
    warmup_start_factor: float = 0.1
    ohem: OhemConfig = OhemConfig()
    augment: AugmentConfig = AugmentConfig()
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "seed": 0, "num_samples": 512})
    workers: int = 1

    def schedule(self, iters: Optional[int] = None) -> ScheduleConfig:
        iters = self.iters if iters is None else iters
        warm = iters // 100 if self.warmup_iters is None else self.warmup_iters
        return ScheduleConfig(self.base_lr, max(iters, 1), self.power, warm, self.warmup_start_factor)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["ohem"] = asdict(self.ohem)
        d["augment"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.augment).items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training config keys: {sorted(extra)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "ohem" in d:
            d["ohem"] = OhemConfig(**d["ohem"])
        if "augment" in d:
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def make_dataset(spec: dict):
    kind = spec.get("kind", "synthetic")
    if kind == "synthetic":
        return SyntheticShapesDataset(spec.get("seed", 0), spec.get("num_samples", 512), tuple(spec.get("size", (64, 128))))
    if kind == "manifest":
        return ManifestDataset(spec["path"])
    raise ValueError(f"unknown dataset kind {kind!r}")


class CurvePoint(NamedTuple):
    iteration: int
    lr: float
    loss: float


class TrainResult(NamedTuple):
    model: PPLiteSeg
    curve: List[CurvePoint]
    optimizer: SGD


def load_batch(dataset, indices, cfg: AugmentConfig, seed: int, iteration: int, workers: int = 1):
    """Augmented, stacked batch. Each sample draws from its own (seed, iteration, slot) stream."""

    def one(slot):
        rng = sample_rng(seed, iteration, slot)
        return augment(dataset[int(indices[slot])], cfg, rng)

    slots = range(len(indices))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, slots))
    else:
        samples = [one(s) for s in slots]
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    return images, labels


def train(
    model: PPLiteSeg,
    dataset,
    iters: int,
    cfg: TrainConfig = TrainConfig(),
    seed: Optional[int] = None,
    optimizer: Optional[SGD] = None,
    on_step: Optional[Callable[[CurvePoint], None]] = None,
) -> TrainResult:
    """forward -> OHEM loss -> backward -> SGD, with the warmup + poly schedule.

    Batches are drawn from per-epoch permutations of a generator seeded with
    ``seed``; the run is bitwise reproducible for a fixed seed.
    """
    seed = cfg.seed if seed is None else seed
    optimizer = optimizer or SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    sched = cfg.schedule(iters)
    order_rng = np.random.default_rng([seed, 0xB47C4])
    workers = worker_count(cfg.workers)
    queue: List[int] = []
    curve: List[CurvePoint] = []
    model.train()
    for it in range(iters):
        while len(queue) < cfg.batch_size:
            queue.extend(order_rng.permutation(len(dataset)).tolist())
        idx, queue = queue[:cfg.batch_size], queue[cfg.batch_size:]
        images, labels = load_batch(dataset, idx, cfg.augment, seed, it, workers)

        lr = poly_lr(it, sched)
        try:
            loss = ohem_cross_entropy(model(Tensor(images)), labels, cfg.ohem)
            value = loss.item()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
        except FloatingPointError as exc:  # non-finite activations, loss or gradients
            raise TrainingDivergedError(it, str(exc)) from exc
        point = CurvePoint(it, lr, value)
        curve.append(point)
        if on_step is not None:
            on_step(point)
        if it % 50 == 0:
            log.info("iter %d lr %.5f loss %.4f", it, lr, value)
    return TrainResult(model, curve, optimizer)


def write_curve(path, curve: List[CurvePoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "lr", "loss"])
        for p in curve:
            w.writerow([p.iteration, repr(p.lr), repr(p.loss)])


def evaluate_dataset(model: PPLiteSeg, dataset, num_classes: int, aug: AugmentConfig = AugmentConfig(),
                     batch_size: int = 8) -> ConfusionMatrix:
    """Eval-mode confusion matrix over a dataset of raw samples (normalization only)."""
    cm = ConfusionMatrix(num_classes)
    for start in range(0, len(dataset), batch_size):
        samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        x = np.stack([normalize(s.image, aug.mean, aug.std) for s in samples])
        pred = predict(model, Tensor(x))
        for p, s in zip(pred, samples):
            cm.accumulate(p, s.label)
    return cm
