"""Plain SGD with weight decay and a single step learning-rate decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .tensor import Node


def decay_epoch(fraction: float, total_epochs: int) -> int:
    """First 0-based epoch at or after ``fraction`` of training.

    The product is rounded before the ceiling so 0.7 * 10 lands on 7, not 8.
    """
    return math.ceil(round(fraction * total_epochs, 9))


@dataclass
class SgdState:
    lr: dict = field(default_factory=lambda: {"extractor": 0.01, "head": 0.01})
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    decay_epoch_fraction: float = 0.8

    def __post_init__(self):
        if any(v < 0 for v in self.lr.values()):
            raise ValueError(f"learning rates must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if not 0 < self.decay_epoch_fraction <= 1:
            raise ValueError("decay_epoch_fraction must lie in (0, 1]")

    def effective_lr(self, group: str, epoch: int, total_epochs: int) -> float:
        lr = self.lr[group]
        if epoch >= decay_epoch(self.decay_epoch_fraction, total_epochs):
            lr *= self.decay_factor
        return lr


def sgd_step(groups: Mapping[str, Sequence[Node]], state: SgdState, epoch: int, total_epochs: int) -> None:
    """In place: ``p <- p - lr_eff * (grad + weight_decay * p)`` for every parameter."""
    for group, params in groups.items():
        lr = state.effective_lr(group, epoch, total_epochs)
        for p in params:
            if p.grad.shape != p.value.shape:
                raise ValueError(f"gradient shape {p.grad.shape} does not match parameter {p.value.shape}")
            step = p.grad + state.weight_decay * p.value
            p.value = (p.value - lr * step).astype(p.value.dtype, copy=False)
