"""Knowledge-truncation adaptation loop.

Every ``interval`` iterations the per-filter importance accumulated since
the last round is finalized, and each filter is assigned one of three
operations, stored one character per filter in a memory bank:

* ``P`` preserve: frozen (or modulated, for the modulation policies),
* ``F`` fine-tune: ordinary Adam updates,
* ``X`` pruned: zeroed and never touched again.

All other iterations take one D step and one G step under the bank's mask.
The baselines (plain fine-tuning, EWC, FreezeD) and the ablation variants run
through the same loop so that degenerate configurations reproduce each other
exactly.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from . import rng as rngmod
from .adversarial import g_backward, sample_real, train_step_d, train_step_g
from .importance import (ESTIMATORS, ImportanceAccumulator, ImportanceReport, accumulate, ewc_penalty,
                         finalize, probe_modulation, report_rows, rerank, sample_ewc_fisher)
from .models import FilterLayout, GANPair, Network, build_filter_layout, clone_for_adaptation, reinit_filter
from .optim import Adam
from .tensor import ContractError, NonFiniteError

log = logging.getLogger(__name__)

PRESERVE, FINETUNE, PRUNED = "P", "F", "X"


class AdaptationError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"adaptation aborted at iteration {iteration}: {cause}")
        self.iteration = iteration


# policies --------------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    name: str
    schedule: str = "none"      # dynamic | static | none
    preserve: str = "none"      # freeze | modulation | none
    truncation: str = "none"    # prune | reinit | none
    ewc: bool = False
    freeze_d_layers: bool = False
    estimator: str | None = None  # forces the estimator when set


POLICIES: dict[str, Policy] = {p.name: p for p in (
    Policy("tgan"),
    Policy("ewc", ewc=True),
    Policy("freezed", freeze_d_layers=True),
    Policy("rick-dynamic", "dynamic", "freeze", "prune"),
    Policy("rick-static", "static", "freeze", "prune"),
    Policy("no-freeze-prune", "dynamic", "none", "prune"),
    Policy("freeze-no-prune", "dynamic", "freeze", "none"),
    Policy("random-reinit", "dynamic", "freeze", "reinit"),
    Policy("modulation-dynamic", "dynamic", "modulation", "prune"),
    Policy("adam-probe", "static", "modulation", "none", estimator="modulation"),
)}

# CLI method names -> policy names
METHODS = {
    "tgan": "tgan",
    "ewc": "ewc",
    "freezed": "freezed",
    "rick": "rick-dynamic",
    "rick-static": "rick-static",
    "rick-noprune": "freeze-no-prune",
    "rick-nofreeze": "no-freeze-prune",
    "rick-reinit": "random-reinit",
    "rick-modulation": "modulation-dynamic",
    "adam-probe": "adam-probe",
}

# the nine ablation/baseline rows
ABLATION_POLICIES = ("rick-dynamic", "rick-static", "tgan", "ewc", "freezed", "no-freeze-prune",
                     "freeze-no-prune", "random-reinit", "modulation-dynamic")


def get_policy(name: str) -> Policy:
    name = METHODS.get(name, name)
    try:
        return POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown method/policy {name!r}") from None


# config ----------------------------------------------------------------------

@dataclass
class RickConfig:
    method: str = "rick"
    estimator: str = "fisher"
    shots: int = 10
    total_iters: int = 1250
    warmup: int = 250
    interval: int = 50
    prune_rate_g: float = 3.0   # percent
    prune_rate_d: float = 3.0   # percent
    t_high: float = 0.7
    t_low: float = 0.0
    prune_mode: str = "schedule"  # schedule | threshold
    batch_size: int = 4
    lr: float = 0.002
    checkpoint_interval: int = 250
    ewc_lambda: float = 50.0
    ewc_batches: int = 200
    probe_iters: int = 500
    saturating: bool = False
    importance_loss: str = "non-saturating"  # generator loss whose gradients feed importance
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def policy(self) -> Policy:
        return get_policy(self.method)

    def validate(self) -> None:
        get_policy(self.method)
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.warmup < 0 or self.warmup + self.interval > self.total_iters:
            raise ValueError("need 0 <= warmup and warmup + interval <= total_iters")
        for p in (self.prune_rate_g, self.prune_rate_d):
            if not 0.0 <= p / 100.0 < self.t_high <= 1.0:
                raise ValueError("need 0 <= prune rate < t_high <= 1")
        if self.prune_mode not in ("schedule", "threshold"):
            raise ValueError(f"unknown prune mode {self.prune_mode!r}")
        if self.importance_loss not in ("non-saturating", "saturating"):
            raise ValueError(f"unknown importance loss {self.importance_loss!r}")
        if self.shots < 1 or self.batch_size < 1 or self.checkpoint_interval < 1:
            raise ValueError("shots, batch_size and checkpoint_interval must be >= 1")

    def prune_rate(self, network: str) -> float:
        return self.prune_rate_g if network == "G" else self.prune_rate_d

    def round_iterations(self) -> list[int]:
        return [it for it in range(self.warmup + 1, self.total_iters + 1) if it % self.interval == 0]

    # key=value text format
    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "RickConfig":
        return cls(**parse_config_text(text, cls))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str, cls=RickConfig) -> dict:
    """Parse flat ``key=value`` lines; unknown keys raise."""
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value")
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        kind = types[key]
        if kind in (bool, "bool"):
            if value.lower() not in ("true", "false"):
                raise ValueError(f"line {lineno}: {key} must be true/false")
            out[key] = value.lower() == "true"
        elif kind in (int, "int"):
            out[key] = int(value)
        elif kind in (float, "float"):
            out[key] = float(value)
        else:
            out[key] = value
    return out


# memory bank -----------------------------------------------------------------

@dataclass
class MemoryBank:
    states: np.ndarray                   # dtype '<U1', one of P/F/X per filter
    prune_round: np.ndarray              # -1 when never pruned
    round: int = 0
    reinit_count: dict[str, int] = field(default_factory=lambda: {"G": 0, "D": 0})

    @classmethod
    def fresh(cls, n_filters: int) -> "MemoryBank":
        return cls(np.full(n_filters, FINETUNE, dtype="<U1"), np.full(n_filters, -1, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.states)

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.states.copy(), self.prune_round.copy(), self.round, dict(self.reinit_count))

    def as_string(self) -> str:
        return "".join(self.states.tolist())

    def ids(self, state: str, layout: FilterLayout | None = None, network: str | None = None) -> np.ndarray:
        sel = self.states == state
        if network is not None:
            ids = layout.ids(network)
            return ids[sel[ids]]
        return np.flatnonzero(sel)

    def fraction(self, state: str, layout: FilterLayout, network: str) -> float:
        ids = layout.ids(network)
        return float((self.states[ids] == state).sum()) / len(ids)


def _cumulative_target(round_index: int, total_rounds: int, rate_percent: float, n: int) -> int:
    frac = Fraction(round_index) * Fraction(str(rate_percent)) * n / (100 * total_rounds)
    return math.floor(frac)


def estimate_and_assign(bank: MemoryBank, reports: dict[str, ImportanceReport], cfg: RickConfig,
                        round_index: int, total_rounds: int, layout: FilterLayout,
                        policy: Policy | None = None) -> tuple[MemoryBank, dict[str, np.ndarray]]:
    """Decide P/F/X for every active filter from this round's importance.

    Returns the new bank and, per network, the filters selected for
    truncation this round (pruned, or re-initialised for the reinit policy).
    """
    policy = policy or cfg.policy
    if len(bank) != len(layout):
        raise ContractError(f"bank size {len(bank)} != layout size {len(layout)}")
    new = bank.copy()
    new.round = round_index
    selected: dict[str, np.ndarray] = {}
    for net, report in reports.items():
        ids = layout.ids(net)
        active = ids[bank.states[ids] != PRUNED]
        if not np.array_equal(np.sort(report.filter_ids), active):
            raise ContractError(f"{net} report covers {len(report)} filters, {len(active)} are active")
        order = np.lexsort((report.filter_ids, report.importance))
        n_total = len(ids)
        chosen = np.empty(0, dtype=np.int64)
        if policy.truncation != "none":
            if cfg.prune_mode == "threshold":
                chosen = report.filter_ids[report.quantile < cfg.t_low]
            else:
                target = _cumulative_target(round_index, total_rounds, cfg.prune_rate(net), n_total)
                done = (bank.reinit_count[net] if policy.truncation == "reinit"
                        else int((bank.states[ids] == PRUNED).sum()))
                chosen = report.filter_ids[order[:max(0, target - done)]]
        chosen_set = set(chosen.tolist())
        for fid, q in zip(report.filter_ids, report.quantile):
            fid = int(fid)
            if fid in chosen_set:
                if policy.truncation == "prune":
                    new.states[fid] = PRUNED
                    new.prune_round[fid] = round_index
                else:
                    new.states[fid] = FINETUNE
            elif policy.preserve != "none" and q >= cfg.t_high:
                new.states[fid] = PRESERVE
            else:
                new.states[fid] = FINETUNE
        if policy.truncation == "reinit":
            new.reinit_count[net] += len(chosen)
        selected[net] = np.sort(chosen)
    return new, selected


def network_masks(bank: MemoryBank, layout: FilterLayout, net: Network, state: str) -> list[np.ndarray]:
    """One row mask per parameter tensor (weight, bias per layer) selecting filters in ``state``."""
    masks = []
    for li, sl in enumerate(layout.layer_slices(net.tag)):
        rows = bank.states[sl] == state
        masks += [rows, rows]
    return masks


def zero_pruned(gan: GANPair, bank: MemoryBank, layout: FilterLayout) -> None:
    for fid in np.flatnonzero(bank.states == PRUNED):
        f = layout.filters[fid]
        layer = gan.net(f.network).layers[f.layer]
        layer.zero_filter(f.output)
        if layer.mod is not None:
            layer.mod.data[f.output] = 0.0


def apply_bank(gan: GANPair, bank: MemoryBank, layout: FilterLayout) -> dict[str, list[np.ndarray]]:
    """Masks of fine-tunable rows per network; pruned spans are re-zeroed."""
    zero_pruned(gan, bank, layout)
    return {tag: network_masks(bank, layout, gan.net(tag), FINETUNE) for tag in ("G", "D")}


class NetOptimizer:
    """Adam on base weights, plus Adam on modulation scalars when enabled."""

    def __init__(self, net: Network, lr: float, modulation: bool = False):
        self.base = Adam(net.params(), base_lr=lr)
        self.mod = Adam(net.mod_params(), base_lr=lr) if modulation else None

    def step(self, iteration, total_iters, masks=None, extra_grads=None):
        base_masks, mod_masks = masks if masks is not None else (None, None)
        lr = self.base.step(iteration, total_iters, base_masks, extra_grads)
        if self.mod is not None:
            self.mod.step(iteration, total_iters, mod_masks)
        return lr

    def zero_filter_moments(self, layer_index: int, output: int) -> None:
        for opt in (self.base, self.mod):
            if opt is None:
                continue
            if opt is self.base:
                opt.zero_rows(2 * layer_index, np.array([output]))
                opt.zero_rows(2 * layer_index + 1, np.array([output]))
            else:
                opt.zero_rows(layer_index, np.array([output]))


# adaptation ------------------------------------------------------------------

@dataclass
class RunReport:
    config: RickConfig
    seed: int
    rows: list[dict] = field(default_factory=list)
    importance_rows: list[tuple] = field(default_factory=list)
    bank: str = ""
    bank_history: list[str] = field(default_factory=list)
    dumps: dict[int, np.ndarray] = field(default_factory=dict)
    wall_clock: float = 0.0

    def bank_summary(self, layout: FilterLayout) -> dict:
        out = {}
        states = np.array(list(self.bank))
        for net in ("G", "D"):
            ids = layout.ids(net)
            out[net] = {s: int((states[ids] == s).sum()) for s in (PRESERVE, FINETUNE, PRUNED)}
        return out


StepHook = Callable[[int, GANPair, MemoryBank, str], None]


def _freezed_bank(bank: MemoryBank, layout: FilterLayout) -> None:
    slices = layout.layer_slices("D")
    for sl in slices[:math.ceil(len(slices) / 2)]:
        bank.states[sl] = PRESERVE


def adapt(source: GANPair, target_shots: np.ndarray, cfg: RickConfig, seed: int | None = None,
          evaluator=None, on_step: StepHook | None = None,
          source_data: np.ndarray | None = None) -> tuple[GANPair, RunReport]:
    """Adapt a copy of ``source`` to ``target_shots`` under ``cfg``'s policy.

    ``evaluator``, when given, is called at every metric checkpoint and must
    expose ``metrics(generator) -> dict`` and ``dump(generator) -> ndarray``.
    ``on_step`` is called after every iteration (warmup, step and round).
    ``source_data`` feeds the discriminator part of the EWC source Fisher.
    """
    seed = cfg.seed if seed is None else seed
    policy = cfg.policy
    estimator = policy.estimator or cfg.estimator
    start = time.perf_counter()
    gan = clone_for_adaptation(source)
    layout = build_filter_layout(gan.g, gan.d)
    train_rng = rngmod.stream(seed, "train")
    reinit_rng = rngmod.stream(seed, "reinit")
    N, Nw = cfg.total_iters, cfg.warmup
    round_its = cfg.round_iterations()
    total_rounds = 1 if policy.schedule == "static" else len(round_its)

    modulated = policy.preserve == "modulation"
    probe_reports = None
    if estimator == "modulation":
        probe_reports = probe_modulation(gan, layout, target_shots, rngmod.stream(seed, "probe"),
                                         probe_iters=cfg.probe_iters, batch_size=cfg.batch_size)
    if modulated:
        gan.g.enable_modulation()
        gan.d.enable_modulation()
    opts = {"G": NetOptimizer(gan.g, cfg.lr, modulated), "D": NetOptimizer(gan.d, cfg.lr, modulated)}

    ewc_state = None
    if policy.ewc:
        fisher = sample_ewc_fisher(source, source_data if source_data is not None else target_shots,
                                   cfg.ewc_batches, rngmod.stream(seed, "ewc"), cfg.batch_size)
        anchors = {tag: [p.data.copy() for p in source.net(tag).params()] for tag in ("G", "D")}
        ewc_state = (fisher, anchors)

    def extra_grads(net: Network):
        if ewc_state is None:
            return None
        fisher, anchors = ewc_state
        return ewc_penalty(net, anchors[net.tag], fisher[net.tag], cfg.ewc_lambda)[1]

    bank = MemoryBank.fresh(len(layout))
    if policy.freeze_d_layers:
        _freezed_bank(bank, layout)
    report = RunReport(cfg, seed)
    accs = {tag: ImportanceAccumulator(layout, tag) for tag in ("G", "D")}

    def masks_for(tag: str):
        net = gan.net(tag)
        base = network_masks(bank, layout, net, FINETUNE)
        mod = [bank.states[sl] == PRESERVE for sl in layout.layer_slices(tag)] if modulated else None
        return base, mod

    def checkpoint(it: int) -> None:
        if evaluator is None:
            return
        g = gan.g
        row = {"iteration": it}
        row.update(evaluator.metrics(g))
        row.update(pruned_frac_g=bank.fraction(PRUNED, layout, "G"), pruned_frac_d=bank.fraction(PRUNED, layout, "D"),
                   frozen_frac_g=bank.fraction(PRESERVE, layout, "G"), frozen_frac_d=bank.fraction(PRESERVE, layout, "D"))
        report.rows.append(row)
        report.dumps[it] = evaluator.dump(g)

    def hook(net: Network) -> None:
        accumulate(accs[net.tag], net)

    checkpoint(0)
    it = 0
    try:
        masks = {tag: masks_for(tag) for tag in ("G", "D")}
        for it in range(1, Nw + 1):
            real = sample_real(target_shots, cfg.batch_size, train_rng)
            z = train_rng.standard_normal((cfg.batch_size, gan.g.dz))
            train_step_d(gan, real, z, opts["D"], it - 1, N, masks["D"], extra_grads(gan.d))
            if on_step is not None:
                on_step(it, gan, bank, "warmup")
            if it % cfg.checkpoint_interval == 0:
                checkpoint(it)

        round_no = 0
        for it in range(Nw + 1, N + 1):
            if it % cfg.interval == 0:
                round_no += 1
                bank = _run_round(gan, bank, accs, layout, cfg, policy, estimator, probe_reports,
                                  round_no, total_rounds, opts, reinit_rng, report)
                masks = {tag: masks_for(tag) for tag in ("G", "D")}
                phase = "round"
            else:
                real = sample_real(target_shots, cfg.batch_size, train_rng)
                z = train_rng.standard_normal((cfg.batch_size, gan.g.dz))
                train_step_d(gan, real, z, opts["D"], it - 1, N, masks["D"], extra_grads(gan.d), hook)
                z = train_rng.standard_normal((cfg.batch_size, gan.g.dz))
                g_hook = hook
                if (cfg.importance_loss == "saturating") != cfg.saturating:
                    g_backward(gan, z, saturating=cfg.importance_loss == "saturating")
                    hook(gan.g)
                    g_hook = None
                train_step_g(gan, z, opts["G"], it - 1, N, masks["G"], extra_grads(gan.g), g_hook,
                             saturating=cfg.saturating)
                phase = "step"
            if on_step is not None:
                on_step(it, gan, bank, phase)
            if it % cfg.checkpoint_interval == 0 or it == N:
                checkpoint(it)
    except (NonFiniteError, FloatingPointError) as exc:
        raise AdaptationError(it, exc) from exc

    if modulated:
        gan.g.bake_modulation()
        gan.d.bake_modulation()
    gan.g.zero_grad()
    gan.d.zero_grad()
    report.bank = bank.as_string()
    report.wall_clock = time.perf_counter() - start
    return gan, report


def _run_round(gan, bank, accs, layout, cfg, policy, estimator, probe_reports, round_no, total_rounds,
               opts, reinit_rng, report: RunReport) -> MemoryBank:
    decide = policy.schedule == "dynamic" or (policy.schedule == "static" and round_no == 1)
    reports: dict[str, ImportanceReport] = {}
    for tag in ("G", "D"):
        ids = layout.ids(tag)
        active = bank.states[ids] != PRUNED
        acc = accs[tag]
        if acc.steps == 0:
            continue
        if probe_reports is not None:
            acc.reset()
            reports[tag] = rerank(probe_reports[tag], ids[active], round_no)
        else:
            reports[tag] = finalize(acc, estimator, active, round_no)
    if decide and reports:
        bank, selected = estimate_and_assign(bank, reports, cfg, round_no, total_rounds, layout, policy)
        for tag, chosen in selected.items():
            for fid in chosen:
                f = layout.filters[int(fid)]
                layer = gan.net(tag).layers[f.layer]
                if policy.truncation == "reinit":
                    reinit_filter(layer, f.output, reinit_rng)
                    if layer.mod is not None:
                        layer.mod.data[f.output] = 0.0
                opts[tag].zero_filter_moments(f.layer, f.output)
        zero_pruned(gan, bank, layout)
    else:
        bank = replace(bank.copy(), round=round_no)
    report.bank_history.append(bank.as_string())
    assignment = bank.as_string()
    for tag in ("G", "D"):
        if tag in reports:
            report.importance_rows += report_rows(reports[tag], assignment)
    return bank
