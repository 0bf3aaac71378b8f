"""Train, check and simulate depth-parallel temporal networks.

Subcommands::

    gradcheck  oracle suite              -> gradcheck.csv (check, seed, target, error, tolerance, passed)
    train      one mode, config seeds    -> metrics.csv, summary.csv, plot_metrics.py, checkpoint_<mode>_<seed>.bin
    compare    every configured mode     -> metrics.csv, summary.csv, plot_metrics.py [, grad_similarity.csv]
    montage    concat-montage sweep      -> montage.csv (cuts, seed, mode, diverged, train_loss, val_loss, val_step_accuracy)
    schedule   device schedule simulator -> schedule.csv, timeline_<strategy>.csv, gantt.txt
    memory     stored-activation counts  -> memory.csv (strategy, T, unit, scalars)

metrics.csv columns: seed, mode, epoch, train_loss, val_loss and then
val_step_accuracy, val_accuracy (classification) or val_l2 (future frame).

Exit codes: 0 success, 2 config error, 3 divergence, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .checkpoint import save_checkpoint
from .experiments import (MODE_ALIASES, PRESETS, ConfigError, ExperimentConfig, ExperimentDiverged, build_model,
                          load_experiment_config, run_experiment, run_montage_sweep, write_csv)
from .gradcheck import run_suite
from .numerics import OracleFailure
from .pipesim import (DeviceCostProfile, memory_account, simulate_gpipe, simulate_sequential_bp,
                      simulate_sideways)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ORACLE = 0, 2, 3, 4


def _load(args) -> ExperimentConfig:
    base = PRESETS[args.preset] if args.preset else ExperimentConfig()
    config = load_experiment_config(args.config, base) if args.config else base
    changes = {}
    if args.seed is not None:
        changes["seeds"] = (args.seed,)
    if args.stride is not None:
        changes["stride"] = args.stride
    if args.precision is not None:
        changes["engine"] = config.engine.with_(precision=args.precision)
    if args.mode is not None:
        changes["modes"] = (MODE_ALIASES[args.mode],)
    return config.with_(**changes) if changes else config


def cmd_gradcheck(args) -> int:
    rows = run_suite(seeds=args.seeds)
    path = os.path.join(args.out, "gradcheck.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["check", "seed", "target", "error", "tolerance", "passed"])
        for r in rows:
            writer.writerow([r.check, r.seed, r.target, repr(r.error), repr(r.tolerance), r.passed])
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} oracle checks passed -> {path}")
    for r in failed[:10]:
        print(f"FAIL {r.check} seed={r.seed} {r.target}: {r.error:.3e} >= {r.tolerance:.0e}", file=sys.stderr)
    return EXIT_ORACLE if failed else EXIT_OK


def _train(args, config: ExperimentConfig) -> int:
    result = run_experiment(config, args.out)
    for run in result.runs:
        final = run.final
        metric = "val_accuracy" if "val_accuracy" in final else "val_l2"
        print(f"{run.mode:14s} seed={run.seed} {metric}={final[metric]:.4f} ({run.seconds:.1f}s)")
        if args.command == "train":
            save_checkpoint(os.path.join(args.out, f"checkpoint_{run.mode}_{run.seed}.bin"), run.params,
                            config.engine_for(run.mode))
    print(f"results in {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    if args.mode is None:
        config = config.with_(modes=config.modes[:1])
    return _train(args, config)


def cmd_compare(args) -> int:
    config = _load(args)
    if args.mode is None and len(config.modes) < 2:
        config = config.with_(modes=("skip_sideways", "fa_only", "sideways"))
    return _train(args, config)


def cmd_montage(args) -> int:
    config = _load(args)
    if args.mode is None:
        config = config.with_(modes=config.modes[:1])
    rows = run_montage_sweep(config, tuple(args.cuts), args.out)
    for r in rows:
        state = "diverged" if r["diverged"] else f"val_step_accuracy={r['val_step_accuracy']:.4f}"
        print(f"cuts={r['cuts']} seed={r['seed']} {state}")
    return EXIT_DIVERGED if any(r["diverged"] for r in rows) else EXIT_OK


def cmd_schedule(args) -> int:
    if args.stages < 1 or args.micro_batches < 1 or args.frames < 1 or args.comm < 0:
        raise ConfigError("stages, micro-batches and frames must be >= 1; comm must be >= 0")
    if args.costs:
        costs = [float(c) for c in args.costs.split(",")]
        profile = DeviceCostProfile(tuple(c / 2 for c in costs), tuple(c / 2 for c in costs), args.comm)
    else:
        profile = DeviceCostProfile.uniform(args.stages, comm=args.comm)
    results = {
        "sequential_bp": simulate_sequential_bp(profile, args.frames),
        "gpipe": simulate_gpipe(profile, args.micro_batches),
        "sideways": simulate_sideways(profile, args.frames),
    }
    rows = []
    gantt = []
    for name, res in results.items():
        lat = np.asarray(res.frame_latency)
        rows.append({"strategy": name, "step_latency": res.step_latency, "throughput": res.throughput,
                     "bubble_fraction": res.bubble_fraction, "latency_mean": float(lat.mean()),
                     "latency_std": float(lat.std()), "peak_activations": max(res.peak_activations)})
        res.to_csv(os.path.join(args.out, f"timeline_{name}.csv"))
        gantt.append(f"{name}\n{res.gantt(args.width)}\n")
        print(f"{name:14s} throughput={res.throughput:.4f} bubble={res.bubble_fraction:.4f}")
    write_csv(os.path.join(args.out, "schedule.csv"), rows)
    with open(os.path.join(args.out, "gantt.txt"), "w") as fh:
        fh.write("\n".join(gantt))
    return EXIT_OK


def cmd_memory(args) -> int:
    config = _load(args)
    topology = build_model(config, config.modes[0])
    rows = []
    for T in args.T:
        for strategy in ("bp_unrolled", "sideways"):
            for unit, n in enumerate(memory_account(topology, T, strategy, batch=config.batch_size), start=1):
                rows.append({"strategy": strategy, "T": T, "unit": unit, "scalars": n})
    write_csv(os.path.join(args.out, "memory.csv"), rows)
    for T in args.T:
        tot = {s: sum(r["scalars"] for r in rows if r["T"] == T and r["strategy"] == s)
               for s in ("bp_unrolled", "sideways")}
        print(f"T={T:5d} bp_unrolled={tot['bp_unrolled']} sideways={tot['sideways']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI experiment config (applied on top of --preset)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named starting configuration")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--mode", choices=("sideways", "skip", "fa_only"))
    common.add_argument("--stride", type=int, help="frame-rate subsampling stride")
    common.add_argument("--precision", choices=("double", "single"))

    parser = argparse.ArgumentParser(prog="skipsideways", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gradcheck", parents=[common], help="run the oracle suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)
    sub.add_parser("train", parents=[common], help="train one configuration").set_defaults(func=cmd_train)
    sub.add_parser("compare", parents=[common], help="sweep training modes").set_defaults(func=cmd_compare)
    p = sub.add_parser("montage", parents=[common], help="train on concat montages with more cuts")
    p.add_argument("--cuts", type=int, nargs="+", default=[0, 1, 3])
    p.set_defaults(func=cmd_montage)
    p = sub.add_parser("schedule", parents=[common], help="simulate device schedules")
    p.add_argument("--stages", type=int, default=8)
    p.add_argument("--costs", help="comma separated per-stage costs (split evenly into fwd/bwd)")
    p.add_argument("--comm", type=float, default=0.1)
    p.add_argument("--micro-batches", type=int, default=8)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--width", type=int, default=72)
    p.set_defaults(func=cmd_schedule)
    p = sub.add_parser("memory", parents=[common], help="stored activation counts")
    p.add_argument("--T", type=int, nargs="+", default=[16, 64, 256])
    p.set_defaults(func=cmd_memory)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.stride is not None and args.stride < 1:
            raise ConfigError("--stride must be >= 1")
        os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentDiverged as exc:
        print(f"diverged: {exc.report}", file=sys.stderr)
        return EXIT_DIVERGED
    except OracleFailure as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return EXIT_ORACLE


if __name__ == "__main__":
    sys.exit(main())
