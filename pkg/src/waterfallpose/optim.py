"""Adaptive-moment optimizer with decoupled weight decay and step-decay schedule."""

from __future__ import annotations

from typing import Dict, Sequence, Tuple

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 5e-4,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + self.weight_decay * p.data
            p.data -= self.lr * update


def step_decay_lr(base_lr: float, epoch: int, decay_epochs: Sequence[int],
                  factor: float = 0.1) -> float:
    """Learning rate divided by 10 at each listed epoch (0-indexed epochs)."""
    drops = sum(1 for d in decay_epochs if epoch >= d)
    return base_lr * (factor ** drops)
