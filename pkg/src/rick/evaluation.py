"""Distribution distances, diversity and incompatible-knowledge diagnostics.

All metrics work on raw data vectors (2-D points or flattened 8x8 icons).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import FilterLayout, GeneratorNet, generate

SHARED, SOURCE_ONLY, TARGET_ONLY = "shared", "source-only", "target-only"
MODE_LABELS = (SHARED, SOURCE_ONLY, TARGET_ONLY)

PSD_TOL = 1e-10


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "GaussianFit":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need an n x d sample array with n >= 2")
        cov = np.cov(x, rowvar=False, ddof=1)
        cov = np.atleast_2d(cov)
        return cls(x.mean(axis=0), 0.5 * (cov + cov.T), x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    if w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise FloatingPointError(f"matrix not PSD (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_gaussian(a: GaussianFit, b: GaussianFit) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of (S_a S_b)^(1/2) is taken as the trace of the PSD square root
    of S_a^(1/2) S_b S_a^(1/2), which has the same spectrum.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch")
    diff = a.mean - b.mean
    ra = _psd_sqrt(a.cov)
    inner = ra @ b.cov @ ra
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    if w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise FloatingPointError(f"product not PSD (min eigenvalue {w.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    val = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(val, 0.0)


def frechet_samples(x: np.ndarray, y: np.ndarray) -> float:
    return frechet_gaussian(GaussianFit.from_samples(x), GaussianFit.from_samples(y))


def poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _offdiag_sum(k: np.ndarray) -> float:
    # subtracting the trace from the full sum would cancel digits
    k = k.copy()
    np.fill_diagonal(k, 0.0)
    return math.fsum(k.sum(axis=1))


def kid_mmd(x: np.ndarray, y: np.ndarray, scale: float = 1e3) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel, times ``scale``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise ValueError("kid_mmd needs at least 2 samples per set")
    sxx = _offdiag_sum(poly_kernel(x, x)) / (m * (m - 1))
    syy = _offdiag_sum(poly_kernel(y, y)) / (n * (n - 1))
    sxy = math.fsum(poly_kernel(x, y).sum(axis=1)) / (m * n)
    return float(scale * (sxx + syy - 2.0 * sxy))


Distance = Callable[[np.ndarray, np.ndarray], np.ndarray]


def euclidean_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Euclidean distances, rows of ``a`` against rows of ``b``."""
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, 4_000_000 // max(1, b.shape[0] * a.shape[1]))
    for s in range(0, a.shape[0], step):
        diff = a[s:s + step, None, :] - b[None, :, :]
        out[s:s + step] = np.sqrt((diff * diff).sum(axis=-1))
    return out


class ProjectionDistance:
    """Euclidean distance after a fixed random linear embedding."""

    def __init__(self, in_dim: int, out_dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((in_dim, out_dim)) / np.sqrt(out_dim)

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return euclidean_matrix(a @ self.proj, b @ self.proj)


def assign_clusters(generated: np.ndarray, targets: np.ndarray, distance: Distance = euclidean_matrix) -> np.ndarray:
    """Index of the closest target for each generated sample (ties to the lowest index)."""
    return np.argmin(distance(generated, targets), axis=1)


def intra_diversity(generated: np.ndarray, targets: np.ndarray, distance: Distance = euclidean_matrix) -> float:
    """Mean within-cluster pairwise distance, clusters keyed by nearest target.

    All unordered pairs in every cluster are pooled, so larger clusters weigh
    in proportion to their pair count. Returns 0 when no cluster has a pair.
    """
    generated = np.asarray(generated, dtype=np.float64)
    if generated.shape[0] < 2 or len(targets) < 1:
        raise ValueError("need >= 2 generated samples and >= 1 target")
    labels = assign_clusters(generated, np.asarray(targets, dtype=np.float64), distance)
    parts, pairs = [], 0
    for c in np.unique(labels):
        members = generated[labels == c]
        k = members.shape[0]
        if k < 2:
            continue
        dm = distance(members, members)
        iu = np.triu_indices(k, 1)
        parts.append(dm[iu])
        pairs += len(iu[0])
    # fsum: exactly rounded, so the result does not depend on pair order
    return math.fsum(np.concatenate(parts)) / pairs if pairs else 0.0


@dataclass
class ModeSpec:
    centers: np.ndarray
    labels: list[str]

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if len(self.labels) != len(self.centers) or len(self.centers) == 0:
            raise ValueError("need one label per center and at least one center")
        if any(lab not in MODE_LABELS for lab in self.labels):
            raise ValueError(f"labels must be in {MODE_LABELS}")
        if len(self.centers) > 1:
            d = euclidean_matrix(self.centers, self.centers)
            if (d[np.triu_indices(len(self.centers), 1)] == 0).any():
                raise ValueError("mode centers must be pairwise distinct")

    def nearest(self, samples: np.ndarray) -> np.ndarray:
        return np.argmin(euclidean_matrix(np.asarray(samples, dtype=np.float64), self.centers), axis=1)

    def mask(self, label: str) -> np.ndarray:
        return np.array([lab == label for lab in self.labels])


def mode_masses(samples: np.ndarray, modes: ModeSpec) -> np.ndarray:
    """Fraction of samples whose nearest center is each mode."""
    idx = modes.nearest(samples)
    return np.bincount(idx, minlength=len(modes.labels)) / len(idx)


def incompatible_mass(generated: np.ndarray, modes: ModeSpec) -> float:
    """Fraction of samples nearest to a source-only mode."""
    return float(mode_masses(generated, modes)[modes.mask(SOURCE_ONLY)].sum())


def filter_mode_attribution(g: GeneratorNet, layout: FilterLayout, bank_states: Sequence[str] | str,
                            modes: ModeSpec, latents: np.ndarray) -> dict[int, np.ndarray]:
    """Per-mode mass change when each active G filter is zeroed in turn.

    Weights are restored exactly after each probe.
    """
    base = mode_masses(generate(g, latents), modes)
    out: dict[int, np.ndarray] = {}
    for f in layout.filters:
        if f.network != "G":
            continue
        layer = g.layers[f.layer]
        if bank_states and bank_states[f.filter_id] == "X":
            out[f.filter_id] = np.zeros_like(base)
            continue
        w = layer.weight.data[f.output].copy()
        b = layer.bias.data[f.output].copy()
        try:
            layer.zero_filter(f.output)
            out[f.filter_id] = mode_masses(generate(g, latents), modes) - base
        finally:
            layer.weight.data[f.output] = w
            layer.bias.data[f.output] = b
    return out


def nearest_neighbor(target: np.ndarray, pool: np.ndarray, distance: Distance = euclidean_matrix
                     ) -> tuple[int, np.ndarray, float]:
    pool = np.asarray(pool, dtype=np.float64)
    if len(pool) == 0:
        raise ValueError("empty pool")
    d = distance(np.asarray(target, dtype=np.float64)[None, :], pool)[0]
    i = int(np.argmin(d))
    return i, pool[i], float(d[i])


def interpolate_latents(g: GeneratorNet, z1: np.ndarray, z2: np.ndarray, steps: int) -> np.ndarray:
    if steps < 2:
        raise ValueError("steps must be >= 2")
    alphas = np.arange(steps) / (steps - 1)
    z = np.stack([(1.0 - a) * z1 + a * z2 for a in alphas])
    z[0], z[-1] = z1, z2
    return generate(g, z)


class Evaluator:
    """Metric bundle evaluated at adaptation checkpoints.

    ``latents`` are fixed up front so every method is scored on identical noise.
    """

    def __init__(self, target_full: np.ndarray, shots: np.ndarray, modes: ModeSpec, latents: np.ndarray,
                 dump_latents: np.ndarray, n_diversity: int = 1000, kid_subset: int = 1000,
                 distance: Distance = euclidean_matrix):
        self.target_full = np.asarray(target_full, dtype=np.float64)
        self.target_fit = GaussianFit.from_samples(self.target_full)
        # evenly strided: sample files are grouped by mode
        n = len(self.target_full)
        self.kid_ref = self.target_full[np.linspace(0, n - 1, min(kid_subset, n)).astype(np.int64)]
        self.shots = shots
        self.modes = modes
        self.latents = latents
        self.dump_latents = dump_latents
        self.n_diversity = n_diversity
        self.kid_subset = kid_subset
        self.distance = distance

    def metrics(self, g: GeneratorNet) -> dict:
        x = generate(g, self.latents)
        return {
            "fd_target": frechet_gaussian(GaussianFit.from_samples(x), self.target_fit),
            "kid_e3": kid_mmd(x[:self.kid_subset], self.kid_ref),
            "intra_div": intra_diversity(x[:self.n_diversity], self.shots, self.distance),
            "incompat_mass": incompatible_mass(x, self.modes),
        }

    def dump(self, g: GeneratorNet) -> np.ndarray:
        return generate(g, self.dump_latents)
