"""Optimizers. Frozen params (``trainable=False``) are never touched."""
from __future__ import annotations

import numpy as np

from .tensor import Param


def clip_grad_norm(params: list[Param], max_norm: float) -> float:
    params = [p for p in params if p.trainable]
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


class SGD:
    """SGD with heavy-ball momentum: ``v = mu * v + g; p -= lr * v``."""

    def __init__(self, params: list[Param], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self) -> None:
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self._velocity.get(id(p))
            v = g.copy() if v is None else self.momentum * v + g
            self._velocity[id(p)] = v
            p.data = p.data - (self.lr * v).astype(p.data.dtype)


class Adam:
    def __init__(self, params: list[Param], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0

    def step(self) -> None:
        self._t += 1
        c1 = 1.0 - self.b1 ** self._t
        c2 = 1.0 - self.b2 ** self._t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            m = self._m.get(id(p), np.zeros_like(g))
            v = self._v.get(id(p), np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self._m[id(p)], self._v[id(p)] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)


def make_optimizer(name: str, params: list[Param], lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(params, lr, momentum)
    if name == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")
