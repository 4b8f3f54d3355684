"""SGD with momentum plus the linear-warmup cosine-annealing schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-5
    batch_size: int = 128
    epochs: int = 10
    warmup_epochs: int = 5
    lr_floor_fraction: float = 0.01
    lam: float = 0.1
    seed: int = 0
    scales: tuple = (16, 32, 64)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be >= 0")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup ({self.warmup_epochs} epochs) exceeds "
                             f"training length ({self.epochs} epochs)")


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Learning rate at a global step.

    Linear ramp from floor to base over the warmup steps (the warmup-epoch
    share of total_steps), then cosine decay from base back down to floor,
    hitting the floor exactly at the last step.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    base = config.base_lr
    floor = config.lr_floor_fraction * base
    warmup_steps = total_steps * config.warmup_epochs // config.epochs
    if step < warmup_steps:
        return floor + (base - floor) * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    if span <= 0:
        return floor
    t = (step - warmup_steps) / span
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * t))


class SGD:
    """Momentum SGD: v <- momentum*v + grad + wd*param; param <- param - lr*v."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocities):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter of shape {p.data.shape}")
            v *= self.momentum
            v += g
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= lr * v


def sgd_step(params, state: SGD, lr: float) -> None:
    """Functional wrapper kept for symmetry with the schedule helpers."""
    state.step(lr)
