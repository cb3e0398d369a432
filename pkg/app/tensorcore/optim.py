"""Momentum SGD."""

from typing import Dict, Sequence

import numpy as np

from app.tensorcore.tensor import Parameter


class SGD:
    """Stochastic gradient descent with classical momentum.

    ``v <- momentum * v + grad``; ``p <- p - lr * v``. A zero learning rate
    leaves parameters bitwise unchanged.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, momentum: float = 0.9):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            v = self._velocity.get(id(p))
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self._velocity[id(p)] = v
            if self.lr != 0.0:
                p.data = p.data - (self.lr * v).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
