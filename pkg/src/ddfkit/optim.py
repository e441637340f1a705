"""In-place optimizers over parameter trees (see :func:`ddfkit.tensor.io.named_arrays`)."""
from __future__ import annotations

import numpy as np

from .tensor.io import named_arrays


def sgd_momentum_step(params, grads, velocity: dict, lr: float, momentum: float = 0.9) -> None:
    g_by_name = dict(named_arrays(grads, trainable_only=True))
    for name, p in named_arrays(params, trainable_only=True):
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g_by_name[name]
        p -= lr * v


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params, grads) -> None:
        self.t += 1
        g_by_name = dict(named_arrays(grads, trainable_only=True))
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, p in named_arrays(params, trainable_only=True):
            g = g_by_name[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
