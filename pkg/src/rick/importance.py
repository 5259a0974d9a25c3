"""Per-filter importance: first-order Fisher, class salience, modulation probing,
and the per-parameter source Fisher used by the EWC baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .adversarial import d_backward, g_backward, sample_real, train_step_d, train_step_g
from .models import FilterLayout, GANPair, Network
from .optim import Adam
from .tensor import ContractError

ESTIMATORS = ("fisher", "salience", "modulation")


def quantile_ranks(values: np.ndarray) -> np.ndarray:
    """q_i = #{j : v_j < v_i} / n."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values.copy()
    ordered = np.sort(values)
    return np.searchsorted(ordered, values, side="left") / values.size


@dataclass
class ImportanceReport:
    round: int
    network: str
    filter_ids: np.ndarray
    importance: np.ndarray
    quantile: np.ndarray
    estimator: str
    layers: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.filter_ids)

    def by_id(self) -> dict[int, tuple[float, float]]:
        return {int(f): (float(v), float(q)) for f, v, q in zip(self.filter_ids, self.importance, self.quantile)}


@dataclass
class ImportanceAccumulator:
    """Running per-filter sums of within-span mean g^2 and mean |g| for one network."""

    layout: FilterLayout
    network: str
    sq_sum: np.ndarray = field(init=False)
    abs_sum: np.ndarray = field(init=False)
    steps: int = field(init=False, default=0)

    def __post_init__(self):
        n = self.layout.count(self.network)
        self.sq_sum = np.zeros(n)
        self.abs_sum = np.zeros(n)
        self._first = int(self.layout.ids(self.network)[0])

    def add(self, sq_means: np.ndarray, abs_means: np.ndarray) -> None:
        self.sq_sum += sq_means
        self.abs_sum += abs_means
        self.steps += 1

    def reset(self) -> None:
        self.sq_sum[:] = 0.0
        self.abs_sum[:] = 0.0
        self.steps = 0

    def filter_ids(self) -> np.ndarray:
        return self._first + np.arange(self.sq_sum.size)


def span_grad_means(net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Within-filter mean squared and mean absolute gradient, filters in layout order."""
    sq, ab = [], []
    for layer in net.layers:
        gw, gb = layer.weight.grad, layer.bias.grad
        if gw is None or gb is None:
            raise ContractError(f"missing gradients on {net.tag} layer")
        n = layer.n_filters
        flat = np.concatenate([gw.reshape(n, -1), gb[:, None]], axis=1)
        sq.append((flat * flat).mean(axis=1))
        ab.append(np.abs(flat).mean(axis=1))
    return np.concatenate(sq), np.concatenate(ab)


def modulation_grad_means(net: Network) -> tuple[np.ndarray, np.ndarray]:
    sq, ab = [], []
    for layer in net.layers:
        if layer.mod is None or layer.mod.grad is None:
            raise ContractError(f"missing modulation gradients on {net.tag} layer")
        g = layer.mod.grad
        sq.append(g * g)
        ab.append(np.abs(g))
    return np.concatenate(sq), np.concatenate(ab)


def accumulate(acc: ImportanceAccumulator, net: Network) -> None:
    if net.tag != acc.network:
        raise ContractError(f"accumulator is for {acc.network}, got {net.tag}")
    acc.add(*span_grad_means(net))


def _finalize(acc: ImportanceAccumulator, sums: np.ndarray, estimator: str, active: np.ndarray | None,
              round_index: int) -> ImportanceReport:
    if acc.steps == 0:
        raise ContractError("finalize called with no accumulated steps")
    values = sums / acc.steps
    ids = acc.filter_ids()
    if active is not None:
        active = np.asarray(active, dtype=bool)
        values, ids = values[active], ids[active]
    layers = np.array([acc.layout.filters[i].layer for i in ids], dtype=np.int64)
    report = ImportanceReport(round_index, acc.network, ids, values, quantile_ranks(values), estimator, layers)
    acc.reset()
    return report


def finalize_fisher(acc: ImportanceAccumulator, active: np.ndarray | None = None,
                    round_index: int = 0) -> ImportanceReport:
    return _finalize(acc, acc.sq_sum.copy(), "fisher", active, round_index)


def finalize_salience(acc: ImportanceAccumulator, active: np.ndarray | None = None,
                      round_index: int = 0) -> ImportanceReport:
    return _finalize(acc, acc.abs_sum.copy(), "salience", active, round_index)


def finalize(acc: ImportanceAccumulator, estimator: str, active=None, round_index: int = 0) -> ImportanceReport:
    if estimator == "salience":
        return finalize_salience(acc, active, round_index)
    return finalize_fisher(acc, active, round_index)


def rerank(report: ImportanceReport, active_ids: Iterable[int], round_index: int) -> ImportanceReport:
    """Restrict a fixed report to the currently active filters and recompute quantiles."""
    keep = np.isin(report.filter_ids, np.fromiter(active_ids, dtype=np.int64))
    values = report.importance[keep]
    layers = None if report.layers is None else report.layers[keep]
    return ImportanceReport(round_index, report.network, report.filter_ids[keep], values,
                            quantile_ranks(values), report.estimator, layers)


# EWC -------------------------------------------------------------------------

def ewc_source_fisher(gan: GANPair, latent_batches: Sequence[np.ndarray],
                      real_batches: Sequence[np.ndarray] | None = None) -> dict[str, list[np.ndarray]]:
    """Per-parameter mean squared gradient over the given batches.

    G entries come from the generator loss on generated batches. D entries
    come from the discriminator loss, only when ``real_batches`` is given.
    """
    out: dict[str, list[np.ndarray]] = {}
    n = len(latent_batches)
    fisher_g = [np.zeros_like(p.data) for p in gan.g.params()]
    for z in latent_batches:
        g_backward(gan, z)
        for f, p in zip(fisher_g, gan.g.params()):
            f += p.grad * p.grad
    out["G"] = [f / n for f in fisher_g]
    if real_batches is not None:
        fisher_d = [np.zeros_like(p.data) for p in gan.d.params()]
        for real, z in zip(real_batches, latent_batches):
            d_backward(gan, real, z)
            for f, p in zip(fisher_d, gan.d.params()):
                f += p.grad * p.grad
        out["D"] = [f / n for f in fisher_d]
    gan.g.zero_grad()
    gan.d.zero_grad()
    return out


def sample_ewc_fisher(gan: GANPair, source_data: np.ndarray, n_batches: int, rng: np.random.Generator,
                      batch_size: int = 4) -> dict[str, list[np.ndarray]]:
    latents = [rng.standard_normal((batch_size, gan.g.dz)) for _ in range(n_batches)]
    reals = [sample_real(source_data, batch_size, rng) for _ in range(n_batches)]
    return ewc_source_fisher(gan, latents, reals)


def ewc_penalty(net: Network, anchor: Sequence[np.ndarray], fisher: Sequence[np.ndarray],
                lam: float) -> tuple[float, list[np.ndarray]]:
    """lam * sum F * (theta - theta_src)^2 and its gradient."""
    value = 0.0
    grads = []
    for p, a, f in zip(net.params(), anchor, fisher):
        diff = p.data - a
        value += float((f * diff * diff).sum())
        grads.append(2.0 * lam * f * diff)
    return lam * value, grads


# modulation probing ----------------------------------------------------------

def probe_modulation(gan: GANPair, layout: FilterLayout, target_data: np.ndarray, rng: np.random.Generator,
                     probe_iters: int = 500, window: int = 50, batch_size: int = 4,
                     round_index: int = 0) -> dict[str, ImportanceReport]:
    """Train only per-filter modulation scalars on target data, then report their Fisher.

    Base weights are never written; modulation is removed afterwards.
    """
    if probe_iters < 1:
        raise ValueError("probe_iters must be >= 1")
    gan.g.enable_modulation()
    gan.d.enable_modulation()
    for net in (gan.g, gan.d):
        for layer in net.layers:
            layer.mod.data[:] = 0.0
    opt_g = Adam(gan.g.mod_params())
    opt_d = Adam(gan.d.mod_params())
    accs = {tag: ImportanceAccumulator(layout, tag) for tag in ("G", "D")}
    start = max(0, probe_iters - window)
    try:
        for it in range(probe_iters):
            collect = it >= start

            def hook(net, collect=collect):
                if collect:
                    accs[net.tag].add(*modulation_grad_means(net))

            real = sample_real(target_data, batch_size, rng)
            z = rng.standard_normal((batch_size, gan.g.dz))
            train_step_d(gan, real, z, opt_d, it, probe_iters, hook=hook)
            z = rng.standard_normal((batch_size, gan.g.dz))
            train_step_g(gan, z, opt_g, it, probe_iters, hook=hook)
    finally:
        gan.g.disable_modulation()
        gan.d.disable_modulation()
        gan.g.zero_grad()
        gan.d.zero_grad()
    reports = {}
    for tag, acc in accs.items():
        rep = finalize_fisher(acc, round_index=round_index)
        rep.estimator = "modulation"
        reports[tag] = rep
    return reports


# CSV -------------------------------------------------------------------------

IMPORTANCE_COLUMNS = ("round", "filter_id", "network", "layer", "importance", "quantile", "assignment")


def write_importance_csv(path, rows: Iterable[Sequence], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh)
        if not append:
            w.writerow(IMPORTANCE_COLUMNS)
        for r in rows:
            w.writerow(r)


def report_rows(report: ImportanceReport, assignment: str) -> list[tuple]:
    """CSV rows for one report; ``assignment`` is the bank string after the round."""
    layers = report.layers if report.layers is not None else np.full(len(report), -1)
    return [(report.round, int(f), report.network, int(li), repr(float(v)), repr(float(q)), assignment[int(f)])
            for f, li, v, q in zip(report.filter_ids, layers, report.importance, report.quantile)]
