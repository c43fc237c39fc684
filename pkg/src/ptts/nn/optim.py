from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant learning rate: ``initial`` before ``boundary`` steps, ``final`` after."""

    initial: float = 0.002
    final: float = 1e-4
    boundary: int = 50000

    def __call__(self, step: int) -> float:
        return self.initial if step < self.boundary else self.final


class Adam:
    def __init__(self, params, schedule=None, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.schedule = schedule or StepSchedule()
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """Apply one bias-corrected Adam update; parameters without a gradient are skipped."""
        lr = self.lr
        t = self.step_count + 1
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            p.m = self.beta1 * p.m + (1 - self.beta1) * g
            p.v = self.beta2 * p.v + (1 - self.beta2) * g * g
            update = lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)
        self.step_count = t
