"""Adam with a cosine learning-rate schedule and per-filter update masks."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor

BETA1 = 0.5
BETA2 = 0.999
EPS = 1e-8
BASE_LR = 0.002


def cosine_lr(iteration: int, total_iters: int, base_lr: float = BASE_LR) -> float:
    """Cosine annealing from ``base_lr`` at 0 down to 0 at ``total_iters``."""
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * iteration / total_iters))


class Adam:
    """Adam over a fixed list of tensors.

    ``step`` takes one optional boolean row mask per parameter; row ``o`` of a
    parameter is its ``o``-th filter. Masked-out rows keep their values and
    their moments bit-for-bit.
    """

    def __init__(self, params: Sequence[Tensor], base_lr: float = BASE_LR,
                 betas: tuple[float, float] = (BETA1, BETA2), eps: float = EPS):
        self.params = list(params)
        self.base_lr = base_lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, iteration: int, total_iters: int, masks: Sequence[np.ndarray | None] | None = None,
             extra_grads: Sequence[np.ndarray | None] | None = None) -> float:
        if not 0 <= iteration < total_iters:
            raise ValueError(f"iteration {iteration} outside schedule [0, {total_iters})")
        lr = cosine_lr(iteration, total_iters, self.base_lr)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            mask = None if masks is None else masks[i]
            if mask is not None and not mask.any():
                continue
            g = p.grad
            if g is None:
                continue
            if extra_grads is not None and extra_grads[i] is not None:
                g = g + extra_grads[i]
            m_new = b1 * self.m[i] + (1.0 - b1) * g
            v_new = b2 * self.v[i] + (1.0 - b2) * g * g
            upd = lr * (m_new / c1) / (np.sqrt(v_new / c2) + self.eps)
            if mask is None or mask.all():
                self.m[i] = m_new
                self.v[i] = v_new
                p.data = p.data - upd
            else:
                self.m[i][mask] = m_new[mask]
                self.v[i][mask] = v_new[mask]
                p.data[mask] = p.data[mask] - upd[mask]
        return lr

    def zero_rows(self, index: int, rows: np.ndarray) -> None:
        """Reset the moments of the given filter rows of one parameter."""
        self.m[index][rows] = 0.0
        self.v[index][rows] = 0.0


def adam_step(opt: Adam, iteration: int, total_iters: int, masks=None) -> float:
    return opt.step(iteration, total_iters, masks)
