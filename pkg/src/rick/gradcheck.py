"""Central finite-difference check of analytic gradients.

Probes whose +eps and -eps evaluations land on different sides of a
leaky-relu or clamp kink are not differentiable there; they are skipped
and counted rather than compared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, trace_branches


@dataclass
class GradCheck:
    max_rel_error: float
    probes: int
    skipped: int  # probes straddling a kink


def _eval(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    with trace_branches() as trace:
        value = fn().item()
    return value, trace


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5,
                 coords: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences at ``coords`` (flat indices; default all).

    Returns (estimates, valid) where ``valid`` is False for kink-crossing probes.
    """
    flat = param.data.reshape(-1)
    coords = np.arange(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    valid = np.ones(len(coords), dtype=bool)
    with no_grad():
        for k, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + eps
            hi, hi_br = _eval(fn)
            flat[i] = old - eps
            lo, lo_br = _eval(fn)
            flat[i] = old
            out[k] = (hi - lo) / (2.0 * eps)
            valid[k] = _same_branches(hi_br, lo_br)
    return out, valid


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise ||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> GradCheck:
    """Compare backward() against central differences, tensor by tensor.

    ``fn`` must build a scalar loss from the current parameter values. With
    ``max_coords``, each tensor is probed at that many random coordinates.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    backward(fn())
    worst, probes, skipped = 0.0, 0, 0
    for p in params:
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False))
            analytic = analytic[coords]
        numeric, valid = numeric_grad(fn, p, eps, coords)
        probes += len(valid)
        skipped += int((~valid).sum())
        worst = max(worst, relative_error(analytic[valid], numeric[valid]))
    return GradCheck(worst, probes, skipped)
