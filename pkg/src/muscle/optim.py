"""SGD with momentum and polynomial learning-rate decay."""

from __future__ import annotations

from typing import Dict

import numpy as np

from .tensor import Tensor


def poly_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    return base_lr * (1.0 - min(step, total_steps) / max(total_steps, 1)) ** power


class SGD:
    """Heavy-ball SGD over a name -> Tensor mapping.

    Parameters whose ``grad`` is ``None`` after the backward pass are left
    untouched, momentum included.
    """

    def __init__(self, params: Dict[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, total_steps: int = 1, power: float = 0.9,
                 clip_norm: float = None):
        self.params = params
        self.base_lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.power = power
        self.clip_norm = clip_norm
        self.step_count = 0
        self.buffers: Dict[str, np.ndarray] = {}

    @property
    def lr(self) -> float:
        return poly_lr(self.base_lr, self.step_count, self.total_steps, self.power)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values() if p.grad is not None)))

    def step(self) -> None:
        lr = self.lr
        scale = 1.0
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data = p.data - lr * buf
        self.step_count += 1
