"""Adam and the cosine-annealing learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(base_lr: float, epoch: int, t_max: int) -> float:
    """Learning rate at ``epoch``: ``base_lr * (1 + cos(pi * epoch / t_max)) / 2``."""
    if t_max <= 0:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * min(epoch, t_max) / t_max)) / 2.0


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict):
        """Update ``params`` in place. Non-finite gradient tensors are skipped and counted."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for key, p in params.items():
            g = grads.get(key)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                continue
            m = self.m.setdefault(key, np.zeros_like(p))
            v = self.v.setdefault(key, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return params


def adam_step(state: Adam, params: dict, grads: dict):
    return state.step(params, grads)
