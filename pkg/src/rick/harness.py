"""Experiment orchestration: data, source pretraining, adaptation runs, reports."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import rng as rngmod
from .adversarial import sample_real, train_step_d, train_step_g
from .data import (SyntheticSourceSpec, SyntheticTargetSpec, draw_shots, gen_source, gen_target,
                   mode_spec, read_modes, read_samples, write_modes, write_samples)
from .evaluation import (Evaluator, ModeSpec, ProjectionDistance, euclidean_matrix, frechet_samples,
                         incompatible_mass)
from .importance import write_importance_csv
from .models import GANPair, build_filter_layout, build_gan, generate
from .optim import Adam
from .scheduler import RickConfig, RunReport, adapt, get_policy
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

OUTPUT_ENV = "RICK_OUTPUT_ROOT"
METRIC_COLUMNS = ("iteration", "fd_target", "kid_e3", "intra_div", "incompat_mass",
                  "pruned_frac_g", "pruned_frac_d", "frozen_frac_g", "frozen_frac_d")
SHOT_SWEEP = (1, 5, 10, 25, 50, 100)
OVERFIT_ITERS = (0, 500, 750, 1000, 1250)
N_DUMP = 16

# source pretraining defaults, point testbed
PRETRAIN_ITERS = 8000
PRETRAIN_BATCH = 128
PRETRAIN_LR = 0.001
# pretrained point GAN must reach this Frechet distance to held-out source data
PRETRAIN_FD_GATE = 0.05


def output_root(default: str | Path = "runs") -> Path:
    return Path(os.environ.get(OUTPUT_ENV, default))


def arch_for(testbed: str) -> str:
    return "point-mlp" if testbed == "point" else "icon-conv"


@dataclass
class Scenario:
    """Source/target domains and mode labels derived from one data seed."""

    source_spec: SyntheticSourceSpec = field(default_factory=SyntheticSourceSpec)
    target_spec: SyntheticTargetSpec = field(default_factory=SyntheticTargetSpec)
    data_seed: int = 0

    def __post_init__(self):
        rng = rngmod.stream(self.data_seed, "data")
        self.source = gen_source(self.source_spec, rng)
        self.held_out = gen_source(self.source_spec, rng)
        self.target = gen_target(self.source_spec, self.target_spec, rng)
        self.modes = mode_spec(self.source_spec, self.target_spec)

    @property
    def arch(self) -> str:
        return arch_for(self.source_spec.testbed)

    def shots(self, seed: int, k: int | None = None) -> np.ndarray:
        k = self.target_spec.shots if k is None else k
        if k <= 0:  # "All": the full target set
            return self.target.samples
        return draw_shots(self.target, k, rngmod.stream(seed, "shots"))

    def distance(self):
        if self.source_spec.testbed == "point":
            return euclidean_matrix
        return ProjectionDistance(64, 32, seed=self.data_seed)

    def evaluator(self, shots: np.ndarray, n_eval: int = 5000, n_diversity: int = 1000,
                  kid_subset: int = 1000) -> Evaluator:
        dz = build_gan(self.arch, np.random.default_rng(0)).g.dz
        latents = rngmod.stream(self.data_seed, "eval").standard_normal((n_eval, dz))
        dump = rngmod.stream(self.data_seed, "dump").standard_normal((N_DUMP, dz))
        return Evaluator(self.target.samples, shots, self.modes, latents, dump,
                         n_diversity=n_diversity, kid_subset=kid_subset, distance=self.distance())


# pretraining -----------------------------------------------------------------

def pretrain_source(data: np.ndarray, arch: str, iters: int = PRETRAIN_ITERS, seed: int = 0,
                    batch_size: int = PRETRAIN_BATCH, lr: float = PRETRAIN_LR) -> GANPair:
    """Unrestricted GAN training on the full source set."""
    gan = build_gan(arch, rngmod.stream(seed, "init"))
    opt_g, opt_d = Adam(gan.g.params(), lr), Adam(gan.d.params(), lr)
    rng = rngmod.stream(seed, "train")
    for it in range(iters):
        try:
            real = sample_real(data, batch_size, rng)
            train_step_d(gan, real, rng.standard_normal((batch_size, gan.g.dz)), opt_d, it, iters)
            train_step_g(gan, rng.standard_normal((batch_size, gan.g.dz)), opt_g, it, iters)
        except NonFiniteError as exc:
            raise RuntimeError(f"pretraining diverged at iteration {it}") from exc
    gan.g.zero_grad()
    gan.d.zero_grad()
    return gan


def source_quality(gan: GANPair, scenario: Scenario, n: int = 5000) -> dict:
    z = rngmod.stream(scenario.data_seed, "eval").standard_normal((n, gan.g.dz))
    x = generate(gan.g, z)
    return {"fd_heldout": frechet_samples(x, scenario.held_out.samples),
            "incompat_mass": incompatible_mass(x, scenario.modes)}


# single run ------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def write_run(run_dir: Path, gan: GANPair, report: RunReport) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(report.config.to_text())
    write_metrics_csv(run_dir / "metrics.csv", report.rows)
    write_importance_csv(run_dir / "importance.csv", report.importance_rows)
    ckpt.save(run_dir / "final.ckpt", gan, report.bank, report.config.total_iters, report.seed)
    dump_dir = run_dir / "dumps"
    dump_dir.mkdir(exist_ok=True)
    for it, x in sorted(report.dumps.items()):
        write_samples(dump_dir / f"iter_{it:05d}.csv", x)
    layout = build_filter_layout(gan.g, gan.d)
    summary = {"method": report.config.method, "policy": report.config.policy.name, "seed": report.seed,
               "final": report.rows[-1] if report.rows else {}, "bank": report.bank_summary(layout),
               "rounds": len(report.bank_history), "wall_clock_s": report.wall_clock}
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def run_one(source: GANPair, scenario: Scenario, cfg: RickConfig, run_dir: Path | None = None,
            n_eval: int = 5000) -> tuple[GANPair, RunReport]:
    shots = scenario.shots(cfg.seed, cfg.shots)
    evaluator = scenario.evaluator(shots, n_eval=n_eval)
    gan, report = adapt(source, shots, cfg, evaluator=evaluator, source_data=scenario.source.samples)
    if run_dir is not None:
        write_run(run_dir, gan, report)
    return gan, report


def _run_job(args) -> tuple[str, str | None]:
    source_bytes, scenario, cfg, run_dir, n_eval = args
    try:
        run_one(ckpt.loads(source_bytes).gan, scenario, cfg, Path(run_dir), n_eval)
        return run_dir, None
    except Exception as exc:  # recorded, the sweep continues
        log.exception("run %s failed", run_dir)
        return run_dir, f"{type(exc).__name__}: {exc}"


def run_experiment(source: GANPair, scenario: Scenario, methods: Iterable[str], base_cfg: RickConfig,
                   seeds: Iterable[int], out_dir: Path, jobs: int = 1, n_eval: int = 5000,
                   tag: str = "") -> list[Path]:
    """Adapt every (method, seed) pair; returns the run directories that completed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    src_bytes = ckpt.dumps(source)
    work = []
    for method in methods:
        get_policy(method)
        for seed in seeds:
            cfg = replace(base_cfg, method=method, seed=seed)
            name = f"{method}{tag}" if tag else method
            work.append((src_bytes, scenario, cfg, str(out_dir / name / f"seed_{seed}"), n_eval))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_job, work))
    else:
        results = [_run_job(w) for w in work]
    failures = {d: e for d, e in results if e is not None}
    if failures:
        (out_dir / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True))
    return [Path(d) for d, e in results if e is None]


# aggregation -----------------------------------------------------------------

def load_run(run_dir: Path) -> dict:
    run_dir = Path(run_dir)
    cfg = RickConfig.from_text((run_dir / "config.txt").read_text())
    return {"dir": run_dir, "config": cfg, "rows": read_metrics_csv(run_dir / "metrics.csv")}


def _label(run: dict) -> str:
    # sweep runs live under "<method>@<param>=<value>"
    parent = run["dir"].parent.name
    return parent if parent.startswith(run["config"].method + "@") else run["config"].method


def aggregate(run_dirs: Iterable[Path], iteration: int | None = None,
              columns: Sequence[str] = METRIC_COLUMNS[1:]) -> list[dict]:
    """Per-method median and IQR across seeds at one iteration (default: each run's last row).

    Rows are sorted by method name so the result does not depend on input order.
    """
    groups: dict[str, list[dict]] = {}
    for d in run_dirs:
        run = load_run(d)
        rows = run["rows"]
        row = rows[-1] if iteration is None else next(r for r in rows if r["iteration"] == iteration)
        groups.setdefault(_label(run), []).append(row)
    table = []
    for method in sorted(groups):
        rows = groups[method]
        entry: dict = {"method": method, "n_runs": len(rows), "iteration": rows[0]["iteration"]}
        for c in columns:
            vals = np.array([r[c] for r in rows])
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            entry[c] = float(med)
            entry[f"{c}_iqr"] = float(q3 - q1)
        table.append(entry)
    return table


def write_table(path: Path, table: Sequence[dict]) -> None:
    if not table:
        return
    cols = list(table[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in table:
            w.writerow([_fmt(r[c]) for c in cols])


def trajectory(run_dirs: Iterable[Path], column: str) -> dict[str, dict[int, float]]:
    """method -> iteration -> median of ``column`` across seeds."""
    acc: dict[str, dict[int, list[float]]] = {}
    for d in run_dirs:
        run = load_run(d)
        per = acc.setdefault(_label(run), {})
        for r in run["rows"]:
            per.setdefault(r["iteration"], []).append(r[column])
    return {m: {it: float(np.median(v)) for it, v in sorted(per.items())} for m, per in sorted(acc.items())}


def report(run_dirs: Sequence[Path], out_dir: Path, plots: bool = True) -> Path:
    """Write ``summary.csv`` (+ ``overfitting.csv``) and, optionally, figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = aggregate(run_dirs)
    write_table(out_dir / "summary.csv", table)
    traj = trajectory(run_dirs, "intra_div")
    with open(out_dir / "overfitting.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method"] + [f"iter_{i}" for i in OVERFIT_ITERS])
        for m, per in traj.items():
            w.writerow([m] + [_fmt(per[i]) if i in per else "" for i in OVERFIT_ITERS])
    if plots:
        from . import plotting
        plotting.summary_bars(table, out_dir / "summary.png")
        plotting.metric_trajectories(run_dirs, out_dir / "trajectories.png")
    return out_dir / "summary.csv"


# data files ------------------------------------------------------------------

def scenario_text(scenario: Scenario) -> str:
    src, tgt = scenario.source_spec, scenario.target_spec
    pairs = [("testbed", src.testbed), ("n_modes", src.n_modes), ("radius", repr(src.radius)),
             ("std", repr(src.std)), ("per_mode", src.per_mode),
             ("shared", ",".join(map(str, tgt.shared))), ("novel_from", ",".join(map(str, tgt.novel_from))),
             ("shift", repr(tgt.shift)), ("shots", tgt.shots), ("target_per_mode", tgt.per_mode),
             ("data_seed", scenario.data_seed)]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def scenario_from_text(text: str) -> Scenario:
    known = {"testbed", "n_modes", "radius", "std", "per_mode", "shared", "novel_from", "shift", "shots",
             "target_per_mode", "data_seed"}
    kv = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep or k.strip() not in known:
            raise ValueError(f"scenario line {lineno}: bad entry {line!r}")
        kv[k.strip()] = v.strip()
    ints = lambda v: tuple(int(t) for t in v.split(",") if t)  # noqa: E731
    src = SyntheticSourceSpec(kv.get("testbed", "point"), int(kv.get("n_modes", 8)), float(kv.get("radius", 4.0)),
                              float(kv.get("std", 0.15)), int(kv.get("per_mode", 2000)))
    tgt = SyntheticTargetSpec(ints(kv.get("shared", "0,2,4")), ints(kv.get("novel_from", "6")),
                              float(kv.get("shift", 1.0)), int(kv.get("shots", 10)),
                              int(kv.get("target_per_mode", 2000)))
    return Scenario(src, tgt, int(kv.get("data_seed", 0)))


def load_scenario(data_dir: Path) -> Scenario:
    """Rebuild a scenario from ``scenario.txt``; sample CSVs, when present, take precedence."""
    data_dir = Path(data_dir)
    scenario = scenario_from_text((data_dir / "scenario.txt").read_text())
    for name, attr in (("source.csv", "source"), ("heldout.csv", "held_out"), ("target.csv", "target")):
        if (data_dir / name).exists():
            x, y = read_samples(data_dir / name)
            dom = getattr(scenario, attr)
            dom.samples, dom.labels = x, y
    if (data_dir / "modes.csv").exists():
        scenario.modes = read_modes(data_dir / "modes.csv")
    return scenario


def write_scenario(out_dir: Path, scenario: Scenario) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scenario.txt").write_text(scenario_text(scenario))
    write_samples(out_dir / "source.csv", scenario.source.samples, scenario.source.labels)
    write_samples(out_dir / "heldout.csv", scenario.held_out.samples, scenario.held_out.labels)
    write_samples(out_dir / "target.csv", scenario.target.samples, scenario.target.labels)
    write_modes(out_dir / "modes.csv", scenario.modes)


def load_modes(path: Path) -> ModeSpec:
    return read_modes(path)


def load_samples(path: Path) -> np.ndarray:
    return read_samples(path)[0]

