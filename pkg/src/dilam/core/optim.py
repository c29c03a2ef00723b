from __future__ import annotations

from typing import Iterable, Optional

import numpy as np

from .tensor import Parameter


class SGD:
    """SGD with heavy-ball momentum (``v = m*v + g; w -= lr*v``).

    Only trainable parameters are touched. Gradients are cleared after each
    step. ``clip`` bounds each gradient element to ``[-clip, clip]``.
    """

    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.0,
                 clip: Optional[float] = None):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.clip = clip
        self._velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for p in self.params:
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                continue
            if self.clip is not None:
                g = np.clip(g, -self.clip, self.clip)
            if self.momentum:
                v = self._velocity.get(p.name)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[p.name] = v
                g = v
            p.tensor.data -= (self.lr * g).astype(p.tensor.data.dtype)
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0, state: Optional[SGD] = None) -> SGD:
    """One functional SGD step. Pass the returned optimizer back in as ``state`` to keep momentum."""
    opt = state if state is not None else SGD(params, lr, momentum)
    opt.step()
    return opt
