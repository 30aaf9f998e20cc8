"""Optimizers and learning-rate schedules operating on leaf tensors."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (PyTorch semantics)."""

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf: list[np.ndarray | None] = [None] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self._buf[i]
                buf = g.copy() if buf is None else self.momentum * buf + g
                self._buf[i] = buf
                g = buf
            p.data -= (self.lr * g).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class ReduceOnPlateau:
    """Multiply the lr by ``factor`` after ``patience`` steps without a new best loss."""

    def __init__(self, optimizer, factor: float = 0.1, patience: int = 50):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def step(self, loss: float) -> None:
        if loss < self.best:
            self.best = loss
            self.bad = 0
            return
        self.bad += 1
        if self.bad >= self.patience:
            self.opt.lr *= self.factor
            self.bad = 0


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


def exp_decay_lr(base: float, epoch: int, epochs: int, final_factor: float = 0.1) -> float:
    """Geometric decay from ``base`` at epoch 0 to ``base * final_factor`` at the last epoch."""
    if epochs <= 1:
        return base
    return base * final_factor ** (epoch / (epochs - 1))
