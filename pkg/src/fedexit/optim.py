"""Plain SGD and the cosine learning-rate schedule."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import NumericError, Parameters


@dataclass
class SgdConfig:
    """Schedule and update knobs. Defaults match the training recipe
    (plain SGD, cosine decay indexed by the global round)."""

    base_lr: float = 5e-3
    min_lr: float = 0.0
    total_steps: int = 1
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.base_lr < self.min_lr:
            raise ValueError(f"base_lr {self.base_lr} < min_lr {self.min_lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def lr_at(step: int, cfg: SgdConfig) -> float:
    """Cosine decay from base_lr to min_lr over total_steps."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > cfg.total_steps:
        warnings.warn(f"lr_at: step {step} beyond schedule end {cfg.total_steps}; clamping")
        step = cfg.total_steps
    span = cfg.base_lr - cfg.min_lr
    return cfg.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * step / cfg.total_steps))


def sgd_step(params: Parameters, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: dict[str, np.ndarray] | None = None,
             ) -> dict[str, np.ndarray] | None:
    """One descent step over every trainable parameter; grads are zeroed after.

    Frozen parameters are never touched. Returns the (possibly created)
    velocity state when momentum > 0, else None.
    """
    if momentum > 0.0 and velocity is None:
        velocity = {}
    for p in params.values():
        if not p.trainable:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{p.name}'")
        if weight_decay != 0.0:
            g = g + weight_decay * p.data
        if momentum > 0.0:
            v = velocity.get(p.name)
            v = g.copy() if v is None else momentum * v + g
            velocity[p.name] = v
            g = v
        p.data -= lr * g
        p.grad[...] = 0.0
    return velocity
