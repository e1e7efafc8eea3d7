"""Parameter containers, seeded initialisation and SGD with momentum."""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Holds named parameter tensors in ``self.params`` (insertion-ordered)."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def named_parameters(self, prefix: str = ""):
        for k, v in self.params.items():
            yield prefix + k, v

    def zero_weights(self) -> None:
        for p in self.params.values():
            p.data[...] = 0.0


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    return dc.add(dc.matmul(x, w), b)


class SGD:
    """Plain SGD with heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr_scale: dict[str, float] | None = None) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            v = self.velocity[k]
            v *= self.momentum
            v += g
            lr = self.lr * (lr_scale.get(k, 1.0) if lr_scale else 1.0)
            p.data -= lr * v
