from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from hsgt.engine.tensor import Parameter
from hsgt.errors import InputError


class AdamW:
    """Adam with decoupled weight decay.

    Moment estimates live on the :class:`Parameter` objects themselves, so a
    parameter keeps its state across optimizer instances.
    """

    def __init__(
        self,
        params: Iterable[Parameter],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-5,
    ):
        self.params = list(params)
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise InputError("AdamW: lr and weight_decay must be >= 0, eps > 0")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise InputError("AdamW: betas must lie in [0, 1)")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if all(p.grad is None for p in self.params):
            raise InputError("AdamW.step() called before any backward()")
        beta1, beta2 = self.betas
        for p in self.params:
            if p.grad is None:
                continue
            p.step += 1
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.exp_avg *= beta1
            p.exp_avg += (1.0 - beta1) * p.grad
            p.exp_avg_sq *= beta2
            p.exp_avg_sq += (1.0 - beta2) * p.grad * p.grad
            correction1 = 1.0 - beta1 ** p.step
            correction2 = 1.0 - beta2 ** p.step
            step_size = self.lr * math.sqrt(correction2) / correction1
            p.data -= step_size * p.exp_avg / (np.sqrt(p.exp_avg_sq) + self.eps)
