"""Adam with linear warmup then inverse-square-root decay, plus norm clipping."""

from __future__ import annotations

import math

import numpy as np


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Learning rate for 1-based ``step``: linear ramp, then ~ 1/sqrt(step)."""
    if base_lr == 0.0:
        return 0.0
    if warmup_steps <= 0:
        return base_lr
    if step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * math.sqrt(warmup_steps / step)


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, warmup_steps: int = 0, betas=(0.9, 0.98),
                 eps: float = 1e-8, clip_norm: float | None = 5.0, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def step(self) -> dict:
        """Apply one update from the accumulated ``.grad`` fields."""
        self.step_count += 1
        lr = lr_at(self.step_count, self.lr, self.warmup_steps)
        norm = self.grad_norm()
        scale = 1.0
        if self.clip_norm and norm > self.clip_norm:
            scale = self.clip_norm / norm
        c1 = 1 - self.b1**self.step_count
        c2 = 1 - self.b2**self.step_count
        for k, p in self.params.items():
            if p.grad is None or lr == 0.0:
                continue
            g = p.grad.astype(np.float64) * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)
        self.zero_grad()
        return {"lr": lr, "grad_norm": norm}
