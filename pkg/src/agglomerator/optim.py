"""SGD with momentum and decoupled weight decay.

The update per parameter p with gradient g:

    v <- momentum * v + g
    p <- p - lr * v - lr * weight_decay * p

Decay multiplies the parameter directly (decoupled), so it is independent of
the gradient scale. Gradients are zeroed after each step.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class DivergedError(RuntimeError):
    """Raised when a gradient or loss turns NaN/Inf."""


class SGD:
    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.value) for name, p in self.params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergedError(f"non-finite gradient in parameter {name!r}")
            v = self.velocity[name]
            if self.momentum != 0.0:
                v *= self.momentum
                v += g
            else:
                v[...] = g
            if self.weight_decay != 0.0:
                p.value -= lr * self.weight_decay * p.value
            p.value -= lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
