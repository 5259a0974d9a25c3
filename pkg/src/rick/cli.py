"""Command-line entry point: ``rick <subcommand> ...``.

Outputs default to ``$RICK_OUTPUT_ROOT`` (or ``./runs``) when ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from . import rng as rngmod
from .data import SyntheticSourceSpec, SyntheticTargetSpec
from .evaluation import filter_mode_attribution
from .harness import (PRETRAIN_BATCH, PRETRAIN_FD_GATE, PRETRAIN_ITERS, PRETRAIN_LR, Scenario, load_modes,
                      load_scenario, output_root, pretrain_source, report, run_experiment, run_one, source_quality,
                      write_scenario)
from .models import build_filter_layout
from .scheduler import ABLATION_POLICIES, METHODS, RickConfig, parse_config_text


def _seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..")
            out += list(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("no seeds given")
    return out


def _scenario(args) -> Scenario:
    if getattr(args, "data", None):
        return load_scenario(Path(args.data))
    return Scenario(SyntheticSourceSpec(testbed=args.testbed), SyntheticTargetSpec(shots=args.shots or 10),
                    data_seed=args.data_seed)


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="directory written by gen-data (default: regenerate)")
    p.add_argument("--testbed", choices=("point", "icon"), default="point")
    p.add_argument("--data-seed", type=int, default=0)


def _add_adapt_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; explicit flags override it")
    p.add_argument("--method", choices=sorted(METHODS), default=None)
    p.add_argument("--estimator", choices=("fisher", "salience", "modulation"), default=None)
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--interval", type=int, default=None)
    p.add_argument("--prune-rate", type=float, default=None, help="percent, applied to G and D")
    p.add_argument("--t-high", type=float, default=None)
    p.add_argument("--ewc-lambda", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--source", required=True, help="source checkpoint")
    p.add_argument("--out", help="output directory")


def _config(args) -> RickConfig:
    values = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    flags = {"method": args.method, "estimator": args.estimator, "total_iters": args.iters,
             "warmup": args.warmup, "interval": args.interval, "t_high": args.t_high,
             "ewc_lambda": args.ewc_lambda, "seed": getattr(args, "seed", None)}
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.shots is not None:
        values["shots"] = args.shots
    if args.prune_rate is not None:
        values["prune_rate_g"] = values["prune_rate_d"] = args.prune_rate
    return RickConfig(**values)


def cmd_gen_data(args) -> int:
    scenario = _scenario(args)
    out = Path(args.out) if args.out else output_root() / "data"
    write_scenario(out, scenario)
    print(f"wrote {out}")
    return 0


def cmd_pretrain(args) -> int:
    scenario = _scenario(args)
    gan = pretrain_source(scenario.source.samples, scenario.arch, args.iters, args.seed, args.batch_size, args.lr)
    out = Path(args.out) if args.out else output_root() / "source.ckpt"
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out, gan, seed=args.seed)
    q = source_quality(gan, scenario)
    print(f"wrote {out}")
    print(f"fd_heldout={q['fd_heldout']!r} incompat_mass={q['incompat_mass']!r}")
    if scenario.source_spec.testbed == "point" and q["fd_heldout"] >= PRETRAIN_FD_GATE:
        print(f"warning: source FD {q['fd_heldout']:.4f} above gate {PRETRAIN_FD_GATE}", file=sys.stderr)
        return 2
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args)
    scenario = _scenario(args)
    source = ckpt.load(args.source).gan
    out = Path(args.out) if args.out else output_root() / cfg.method / f"seed_{cfg.seed}"
    _, rep = run_one(source, scenario, cfg, out)
    last = rep.rows[-1]
    print(f"wrote {out}")
    print(" ".join(f"{k}={v!r}" for k, v in last.items()))
    return 0


def cmd_experiment(args) -> int:
    cfg = _config(args)
    scenario = _scenario(args)
    source = ckpt.load(args.source).gan
    methods = list(ABLATION_POLICIES) if args.methods == "ablation" else args.methods.split(",")
    out = Path(args.out) if args.out else output_root() / "experiment"
    done = run_experiment(source, scenario, methods, cfg, args.seeds, out, jobs=args.jobs)
    report(done, out / "report")
    print(f"{len(done)} runs completed; report in {out / 'report'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    scenario = _scenario(args)
    source = ckpt.load(args.source).gan
    out = Path(args.out) if args.out else output_root() / f"sweep_{args.param}"
    done = []
    for raw in args.values.split(","):
        if args.param == "shots":
            c = replace(cfg, shots=int(raw))
        elif args.param == "t_high":
            c = replace(cfg, t_high=float(raw))
        else:
            c = replace(cfg, prune_rate_g=float(raw), prune_rate_d=float(raw))
        done += run_experiment(source, scenario, args.methods.split(","), c, args.seeds, out,
                               jobs=args.jobs, tag=f"@{args.param}={raw}")
    report(done, out / "report")
    print(f"{len(done)} runs completed; report in {out / 'report'}")
    return 0


def cmd_evaluate(args) -> int:
    gan = ckpt.load(args.ckpt).gan
    scenario = load_scenario(Path(args.data))
    row = scenario.evaluator(scenario.shots(args.seed), n_eval=args.n).metrics(gan.g)
    w = csv.writer(sys.stdout)
    w.writerow(row.keys())
    w.writerow([repr(float(v)) for v in row.values()])
    return 0


def cmd_attribute(args) -> int:
    c = ckpt.load(args.ckpt)
    modes = load_modes(Path(args.modes))
    layout = build_filter_layout(c.gan.g, c.gan.d)
    z = rngmod.stream(args.seed, "eval").standard_normal((args.n_samples, c.gan.g.dz))
    deltas = filter_mode_attribution(c.gan.g, layout, c.bank, modes, z)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out)
    header = ["filter_id", "layer", "output", "source_only_delta"]
    w.writerow(header + [f"mode_{i}" for i in range(len(modes.labels))])
    src_only = modes.mask("source-only")
    for fid, delta in deltas.items():
        f = layout.filters[fid]
        w.writerow([fid, f.layer, f.output, repr(float(delta[src_only].sum()))] + [repr(float(v)) for v in delta])
    if args.out:
        out.close()
    return 0


def cmd_report(args) -> int:
    runs = []
    for root in args.runs:
        root = Path(root)
        runs += sorted(p.parent for p in root.rglob("metrics.csv"))
    if not runs:
        print("no runs found", file=sys.stderr)
        return 1
    out = Path(args.out) if args.out else output_root() / "report"
    path = report(runs, out, plots=not args.no_plots)
    print(path.read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rick", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic source/target data")
    _add_scenario_args(p)
    p.add_argument("--shots", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train the source GAN")
    _add_scenario_args(p)
    p.add_argument("--shots", type=int, default=10)
    p.add_argument("--iters", type=int, default=PRETRAIN_ITERS)
    p.add_argument("--batch-size", type=int, default=PRETRAIN_BATCH)
    p.add_argument("--lr", type=float, default=PRETRAIN_LR)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="few-shot adaptation of a source checkpoint")
    _add_scenario_args(p)
    _add_adapt_args(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("experiment", help="methods x seeds, then report")
    _add_scenario_args(p)
    _add_adapt_args(p)
    p.add_argument("--methods", default="tgan,ewc,rick", help="comma list, or 'ablation' for all nine policies")
    p.add_argument("--seeds", type=_seeds, default=_seeds("0..4"))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep", help="sweep shots, t_high or prune rate")
    _add_scenario_args(p)
    _add_adapt_args(p)
    p.add_argument("--param", choices=("shots", "t_high", "prune_rate"), required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--methods", default="tgan,rick")
    p.add_argument("--seeds", type=_seeds, default=_seeds("0..4"))
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint against a data directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0, help="seed of the k-shot draw used for intra_div")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("attribute", help="per-filter ablation attribution to modes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--modes", required=True, help="modes.csv from gen-data")
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("report", help="aggregate run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
