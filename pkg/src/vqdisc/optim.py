"""AdamW with decoupled weight decay, cosine LR annealing, gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Parameter


def cosine_lr(t: int, base_lr: float = 2e-4, min_lr: float = 1e-6,
              t_max: int = 300) -> float:
    """Annealed rate at epoch t: min + 0.5*(base-min)*(1+cos(pi*t/t_max))."""
    t = min(max(t, 0), t_max)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / t_max))


def clip_global_norm(params: list[Parameter], max_norm: float = 5.0) -> float:
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds
    max_norm.  Returns the pre-clip norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list."""

    def __init__(self, params: list[Parameter], lr: float = 2e-4,
                 weight_decay: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        """Apply one update; parameters without gradients are left alone."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient in parameter {p.name!r} at step {t}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                                 + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
