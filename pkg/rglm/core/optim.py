"""Adaptive-moment optimizer and learning-rate schedules."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from rglm.core.autodiff import Parameter
from rglm.errors import NumericError, ParameterError


class Adam:
    """Adam with decoupled weight decay (AdamW when ``weight_decay > 0``)."""

    def __init__(self, params: Sequence[Parameter], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, schedule=None):
        if lr <= 0:
            raise ParameterError(f"Adam: learning rate must be positive, got {lr}")
        self.params = [p for p in params if p.requires_grad]
        self.base_lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        factor = self.schedule(self.step_count) if self.schedule is not None else 1.0
        return self.base_lr * factor

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        lr = self.lr
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"Adam: non-finite gradient for {p.name or 'parameter'}")
            self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
            m_hat = self._m[i] / (1 - self.beta1 ** t)
            v_hat = self._v[i] / (1 - self.beta2 ** t)
            if self.weight_decay:
                p.data = p.data * (1 - lr * self.weight_decay)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


class LinearWarmup:
    """Linear ramp over ``warmup_steps`` then constant."""

    def __init__(self, total_steps: int, warmup_ratio: float = 0.03):
        self.warmup_steps = max(1, int(round(total_steps * warmup_ratio)))

    def __call__(self, step: int) -> float:
        return min(1.0, (step + 1) / self.warmup_steps)


class CosineWarmup:
    """Linear warmup followed by cosine decay to zero."""

    def __init__(self, total_steps: int, warmup_steps: int):
        self.total_steps = max(1, total_steps)
        self.warmup_steps = max(0, min(warmup_steps, self.total_steps - 1))

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return (step + 1) / (self.warmup_steps + 1)
        progress = (step - self.warmup_steps) / max(1, self.total_steps - self.warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
