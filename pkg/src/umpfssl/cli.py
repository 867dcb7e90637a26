"""Command-line driver: ``umpfssl {partition,run,sweep,report}``."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_config
from .data import write_partition_csv
from .errors import ConfigError
from .experiment import build_dataset, build_partition, mean_curve, repeat_seed, run_experiment
from .ledger import cost1, cost2_bound
from .metrics import best_accuracy, emit_reports, fmt, format_summary
from .rng import derive_seed

log = logging.getLogger("umpfssl")

SWEEP_AXES = {
    "alpha": "partition.alpha",
    "F": "protocol.search_rounds",
    "nu": "protocol.update_period",
    "tau": "protocol.sample_rate",
}


def sweep_cost_percent(cfg: ExperimentConfig, axis: str, value) -> float:
    """Analytic cost of one grid point as a percentage of the axis baseline.

    Baselines: ``nu=1`` for nu, ``tau=1`` for tau, ``F=n`` for F; for alpha
    (which does not change traffic) the greedy-search cost.
    """
    K = cfg.partition.client_count
    p = cfg.protocol
    args = dict(K=K, M=p.helper_list_size, n=p.rounds, nu=p.update_period, F=p.search_rounds,
                R=p.replacements, tau=p.sample_rate)
    if axis == "alpha":
        base = cost1(args["tau"], K, args["n"])
        point = cost2_bound(**args)
    else:
        key = {"F": "F", "nu": "nu", "tau": "tau"}[axis]
        baseline_value = {"F": args["n"], "nu": 1, "tau": 1}[axis]
        point = cost2_bound(**{**args, key: value})
        base = cost2_bound(**{**args, key: baseline_value})
    return 100.0 * float(point / base) if base else 0.0


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "repeats", None) is not None:
        overrides["repeats"] = args.repeats
    if getattr(args, "method", None) is not None:
        overrides["method"] = args.method
    if getattr(args, "ablation", None) is not None:
        overrides["ablation"] = args.ablation
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = args.out
    return cfg.with_overrides(**overrides) if overrides else cfg


def _run_repeats(cfg: ExperimentConfig, out: Path) -> int:
    traces = []
    status = 0
    for r in range(cfg.repeats):
        trace = run_experiment(cfg, r)
        target = out if cfg.repeats == 1 else out / f"repeat_{r:03d}"
        emit_reports(trace, target)
        (target / "config.json").write_text(cfg.to_json())
        if trace.violations:
            status = 1
            for v in trace.violations:
                print(f"invariant violation (repeat {r}): {v}", file=sys.stderr)
        traces.append(trace)
    if cfg.repeats > 1:
        with open(out / "repeats_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "seed", "best_mean_test_acc", "final_mean_test_acc", "final_acc_variance"])
            for r, t in enumerate(traces):
                last = t.metrics[-1] if t.metrics else None
                w.writerow([r, repeat_seed(cfg.seed, r), fmt(best_accuracy(t.metrics)),
                            fmt(last.mean_test_acc if last else math.nan),
                            fmt(last.acc_variance if last else math.nan)])
            bests = [best_accuracy(t.metrics) for t in traces]
            w.writerow(["mean", "", fmt(float(np.mean(bests))), "", ""])
        with open(out / "repeats_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "mean_val_acc", "mean_test_acc"])
            for rnd, v, te in mean_curve(traces):
                w.writerow([rnd, fmt(v), fmt(te)])
    print(format_summary(traces[0]))
    if cfg.repeats > 1:
        bests = [best_accuracy(t.metrics) for t in traces]
        print(f"mean best accuracy over {cfg.repeats} repeats: {np.mean(bests):.4f}")
    return status


def cmd_partition(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    seed = repeat_seed(cfg.seed, 0)
    clients = build_partition(cfg, build_dataset(cfg, seed), seed)
    out.mkdir(parents=True, exist_ok=True)
    write_partition_csv(clients, out / "partition.csv")
    for c in clients:
        print(f"client {c.client_id:>3}: labeled={c.n_labeled:>5} unlabeled={c.n_unlabeled:>5} "
              f"mu={c.labeled_ratio:.3f} counts={c.train_label_counts().tolist()}")
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    return _run_repeats(cfg, Path(cfg.output_dir))


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}")
    raw = [v for v in args.values.split(",") if v.strip()]
    if not raw:
        raise ConfigError("sweep grid is empty")
    cast = float if args.axis in ("alpha", "tau") else int
    values = [cast(v) for v in raw]
    points = [cfg.with_overrides(**{SWEEP_AXES[args.axis]: v,
                                    "seed": derive_seed(cfg.seed, "sweep", i) % (2 ** 31)})
              for i, v in enumerate(values)]
    out = Path(cfg.output_dir)
    rows = []
    status = 0
    for i, (v, point) in enumerate(zip(values, points)):
        sub = out / f"{args.axis}_{i:02d}"
        point = point.with_overrides(output_dir=str(sub))
        status |= _run_repeats(point, sub)
        traces_best = _best_from_dir(sub, point.repeats)
        rows.append([args.axis, v, fmt(traces_best), fmt(sweep_cost_percent(cfg, args.axis, v))])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "best_accuracy", "cost_percent"])
        w.writerows(rows)
    for row in rows:
        print(f"{row[0]}={row[1]}: best={float(row[2]):.4f} cost={float(row[3]):.1f}%")
    return status


def _best_from_dir(path: Path, repeats: int) -> float:
    dirs = [path] if repeats == 1 else [path / f"repeat_{r:03d}" for r in range(repeats)]
    bests = []
    for d in dirs:
        with open(d / "metrics.csv") as fh:
            accs = [float(row["mean_test_acc"]) for row in csv.DictReader(fh)]
        bests.append(max(accs) if accs else math.nan)
    return float(np.mean(bests))


def cmd_report(args) -> int:
    out = Path(args.out)
    metrics = out / "metrics.csv"
    if not metrics.exists():
        print(f"no metrics.csv under {out}", file=sys.stderr)
        return 1
    with open(metrics) as fh:
        rows = list(csv.DictReader(fh))
    print(f"{'round':>5} {'val':>7} {'test':>7} {'var':>8} {'pl_err':>7} {'up':>6} {'down':>6}")
    for r in rows:
        print(f"{int(r['round']):>5} {float(r['mean_val_acc']):7.4f} {float(r['mean_test_acc']):7.4f} "
              f"{float(r['acc_variance']):8.5f} {float(r['pseudo_label_error']):7.4f} "
              f"{int(r['cum_uploads']):>6} {int(r['cum_downloads']):>6}")
    if rows:
        print(f"best mean test accuracy: {max(float(r['mean_test_acc']) for r in rows):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umpfssl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_flags=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int)
        if run_flags:
            p.add_argument("--repeats", type=int)
            p.add_argument("--method", choices=("um_pfssl", "fedavg_semi", "local_only"))
            p.add_argument("--ablation", choices=("en", "ta", "en+ta", "random"))

    p = sub.add_parser("partition", help="partition the dataset and write partition.csv")
    common(p, run_flags=False)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run", help="warm up, run the selected method, write reports")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a grid over one hyper-parameter")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma-separated grid, e.g. 1,5,10,15,20")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print the summary table of a finished run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
