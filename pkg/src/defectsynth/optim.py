"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .tensor import Tensor


class AdamW:
    """Decoupled weight decay Adam over an explicit parameter registry.

    The registry is fixed at construction; `params` is the exact set of
    tensors the optimizer may write to. Updates are in-place (the one
    sanctioned mutation of Tensor data).
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {lr}")
        if not params:
            raise ValidationError("empty parameter registry")
        for name, p in params.items():
            if not p.requires_grad:
                raise ValidationError(f"parameter {name!r} is frozen")
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay != 0.0:
                p.data -= (self.lr * self.weight_decay) * p.data
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
