"""Adam with L2 weight decay and a cosine-annealed step size."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 0:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * min(step, total) / total))


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _moments(self, name: str, shape) -> tuple[np.ndarray, np.ndarray]:
        m, v = self.m.get(name), self.v.get(name)
        if m is None:
            m, v = np.zeros(shape), np.zeros(shape)
        elif m.shape != shape:
            # the prototype matrix grows by rows; new rows start with zero moments
            pad = [(0, s - ms) for s, ms in zip(shape, m.shape)]
            m, v = np.pad(m, pad), np.pad(v, pad)
        return m, v

    def step(self, params: dict, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m, v = self._moments(name, p.data.shape)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
