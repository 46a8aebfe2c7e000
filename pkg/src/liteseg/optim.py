"""SGD with momentum and the warmup + poly learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .nn import Module, Parameter


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.005
    max_iters: int = 1000
    power: float = 0.9
    warmup_iters: int = 10
    warmup_start_factor: float = 0.1

    def __post_init__(self):
        if not 0 <= self.warmup_iters < self.max_iters:
            raise ValueError(f"schedule: need 0 <= warmup_iters < max_iters, got {self.warmup_iters}, {self.max_iters}")
        if self.power <= 0:
            raise ValueError("schedule: power must be positive")

    @classmethod
    def default_for(cls, base_lr: float, max_iters: int, **kw) -> "ScheduleConfig":
        """Warmup over the first 1% of iterations."""
        return cls(base_lr=base_lr, max_iters=max_iters, warmup_iters=kw.pop("warmup_iters", max_iters // 100), **kw)


def poly_lr(it: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to ``base_lr``, then poly decay over the remaining iterations.

    The decay restarts its clock at the end of warmup, so the schedule is
    continuous there and reduces to ``base * (1 - it/max)^power`` when
    ``warmup_iters == 0``.
    """
    if not 0 <= it <= cfg.max_iters:
        raise ValueError(f"poly_lr: iteration {it} outside [0, {cfg.max_iters}]")
    if it < cfg.warmup_iters:
        f = cfg.warmup_start_factor
        return cfg.base_lr * (f + (1 - f) * it / cfg.warmup_iters)
    frac = (it - cfg.warmup_iters) / (cfg.max_iters - cfg.warmup_iters)
    return cfg.base_lr * (1 - frac) ** cfg.power


class SGD:
    """Momentum SGD: ``v = m*v + g + wd*p; p -= lr*v``.

    Weight decay only touches parameters flagged ``decay`` (conv weights),
    never BN affine parameters or biases.
    """

    def __init__(self, params: List[Parameter], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise FloatingPointError("sgd: non-finite gradient")
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def named_velocities(self, model: Module) -> Iterator[Tuple[str, np.ndarray]]:
        index = {id(p): i for i, p in enumerate(self.params)}
        for name, p in model.named_parameters():
            if id(p) in index:
                yield name, self.velocity[index[id(p)]]

    def load_velocities(self, model: Module, state: Dict[str, np.ndarray]) -> None:
        index = {id(p): i for i, p in enumerate(self.params)}
        for name, p in model.named_parameters():
            if name in state and id(p) in index:
                if state[name].shape != p.shape:
                    raise ValueError(f"velocity {name}: shape {state[name].shape} != {p.shape}")
                self.velocity[index[id(p)]] = state[name].astype(p.dtype).copy()

