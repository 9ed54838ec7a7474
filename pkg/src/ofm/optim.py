"""Adam with optional cosine learning-rate decay."""

from __future__ import annotations

import math

import numpy as np


def cosine_lr(step: int, total: int, lr: float, final: float = 0.0) -> float:
    if total <= 1:
        return lr
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return final + 0.5 * (lr - final) * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr: float | None = None, maximize: bool = False) -> None:
        """Update ``params`` in place."""
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            if maximize:
                g = -g
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
