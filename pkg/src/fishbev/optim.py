"""AdamW with decoupled weight decay and a per-epoch multiplicative lr schedule."""

from __future__ import annotations

import numpy as np

from .tensor_core import ParamStore


class AdamW:
    def __init__(self, params: ParamStore, lr: float = 3e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, lr_decay: float = 0.99):
        self.params = params
        self.base_lr = lr
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_decay = lr_decay
        self.step_count = 0
        self.epoch = 0
        self.m = {k: np.zeros_like(params[k].data) for k in params.names()}
        self.v = {k: np.zeros_like(params[k].data) for k in params.names()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1 ** t
        c2 = 1.0 - self.b2 ** t
        for k in self.params.names():
            p = self.params[k]
            g = self.params.grad(k)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def end_epoch(self) -> None:
        self.epoch += 1
        self.lr = self.base_lr * self.lr_decay ** self.epoch
