"""SGD with momentum and the single-step learning-rate decay used everywhere."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step


def decayed_lr(base_lr: float, epoch: int, epochs: int, factor: float = 0.1) -> float:
    """``base_lr`` until 80% of the epochs have run, then ``base_lr * factor``."""
    decay_at = max(1, math.floor(0.8 * epochs))
    return base_lr * factor if epoch >= decay_at else base_lr


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Mapping[Tensor, np.ndarray], lr: float | None = None) -> list[np.ndarray]:
        """Apply one update; parameters missing from ``grads`` get a zero gradient.

        Returns the per-parameter update that was subtracted.
        """
        lr = self.lr if lr is None else lr
        updates = []
        for p, v in zip(self.params, self.velocity):
            g = grads.get(p)
            if g is not None:
                v *= self.momentum
                v += g
            else:
                v *= self.momentum
            upd = v * np.asarray(lr, dtype=p.dtype)
            p.data = p.data - upd
            updates.append(upd)
        return updates
