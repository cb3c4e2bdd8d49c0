"""Command-line entry point.

Subcommands: train, experiment, bench, gradcheck, report, model-summary.
Exit codes: 0 success, 1 check or verification failure, 2 usage error.
All randomness flows from --seed; the CIFAR directory may come from
--data-dir or the PILUNET_DATA_DIR environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import bench as bench_mod
from . import experiments as exp_mod
from .activations import ActivationKind, SharingScheme
from .data import DataFormatError, load_dataset, subset
from .experiments import (
    ExperimentConfig,
    compare,
    config_from_file,
    desk_scale,
    emit_report,
    parameter_counts,
    parse_activation,
    parse_scheme,
    read_run_log,
    run_experiment,
    run_is_complete,
    summarize,
)
from .network import build_cifar_cnn, count_parameters
from .training import TrainConfig, build_and_train, check_activation_gradients, gradient_check

ACTIVATION_CHOICES = [k.value for k in ActivationKind]
SCHEME_CHOICES = [s.value for s in SharingScheme]


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", choices=["cifar10", "cifar100", "synthetic"], default="synthetic")
    p.add_argument("--data-dir", default=None, help="directory with the CIFAR binary files")
    p.add_argument("--subset", type=int, default=None, help="stratified training-subset size")
    p.add_argument("--synthetic-n", type=int, default=512)
    p.add_argument("--synthetic-k", type=int, default=10)


def cmd_train(args) -> int:
    try:
        ds = load_dataset(
            args.dataset, directory=args.data_dir, n=args.synthetic_n, k=args.synthetic_k
        )
        if args.subset is not None:
            ds = subset(ds, args.subset, seed=0)
    except (FileNotFoundError, DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    kind = parse_activation(args.activation)
    scheme = parse_scheme(args.scheme)
    run_id = f"{ds.name}-{kind.value}-{scheme.value}-seed{args.seed}"
    runs_dir = os.path.join(args.out, "runs")
    ckpt_dir = os.path.join(args.out, "checkpoints")
    os.makedirs(runs_dir, exist_ok=True)
    os.makedirs(ckpt_dir, exist_ok=True)
    log_path = os.path.join(runs_dir, f"{run_id}.jsonl")
    ckpt_path = os.path.join(ckpt_dir, f"{run_id}.npz")

    if not args.force and run_is_complete(log_path) and os.path.isfile(ckpt_path):
        print(f"{run_id}: already complete, skipping (use --force to retrain)")
        return 0
    if os.path.exists(log_path):
        os.remove(log_path)

    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        log_level=args.log_level,
    )
    model, record = build_and_train(
        ds, kind, scheme, cfg, dtype=np.dtype(args.dtype).type, run_id=run_id, log_path=log_path
    )
    if record.diverged_epoch is not None:
        print(f"error: run diverged at epoch {record.diverged_epoch}", file=sys.stderr)
        return 1
    model.save(ckpt_path)
    if record.rows:
        final = record.final("test")
        print(
            f"{run_id}: epoch {final.epoch} test loss {final.loss:.4f} "
            f"accuracy {final.accuracy:.4f} error {final.error:.4f}"
        )
    print(f"metrics: {log_path}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    if args.config:
        cfg = config_from_file(args.config)
    else:
        activations = [a.strip() for a in args.activations.split(",") if a.strip()]
        schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
        if len(schemes) == 1:
            schemes = schemes * len(activations)
        if len(schemes) != len(activations):
            raise ValueError("--schemes must name one scheme or one per activation")
        pairs = [(parse_activation(a), parse_scheme(s)) for a, s in zip(activations, schemes)]
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(range(args.num_seeds))
        cfg = ExperimentConfig(
            dataset=args.dataset,
            activations=pairs,
            seeds=seeds,
            train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size),
            subset_n=args.subset,
            data_dir=args.data_dir,
            output_dir=args.out,
            synthetic_n=args.synthetic_n,
            synthetic_k=args.synthetic_k,
        )
    if args.desk_scale:
        cfg = desk_scale(cfg)
    if args.force:
        cfg = replace(cfg, force=True)
    return cfg


def cmd_experiment(args) -> int:
    try:
        cfg = _experiment_config(args)
        records = run_experiment(cfg, jobs=args.jobs)
    except (FileNotFoundError, DataFormatError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    completed = [r for r in records if r.diverged_epoch is None]
    for rec in records:
        if rec.diverged_epoch is not None:
            print(f"warning: {rec.run_id} diverged at epoch {rec.diverged_epoch}", file=sys.stderr)
    if not completed:
        print("error: no runs completed", file=sys.stderr)
        return 1

    summaries = summarize(completed)
    labels = list(summaries)
    baseline = next((l for l in labels if l.startswith("relu-")), labels[0])
    comparisons = [compare(summaries, baseline, l) for l in labels if l != baseline]
    files = emit_report(
        summaries, comparisons, cfg.output_dir, records=completed, param_counts=parameter_counts(cfg)
    )
    for label, s in summaries.items():
        acc = s.metrics["accuracy"]
        print(f"{label}: accuracy {100 * acc.mean:.2f} +- {100 * acc.std:.2f}% over {s.n_seeds} seeds")
    for c in comparisons:
        p = "n/a" if c.mannwhitney_p_one_sided is None else f"{c.mannwhitney_p_one_sided:.4f}"
        print(
            f"{c.challenger} vs {c.baseline}: {c.delta_pp:+.2f} pp, "
            f"relative error improvement {100 * c.rel_err_improvement:.2f}%, "
            f"one-sided Mann-Whitney p {p}"
        )
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_bench(args) -> int:
    sizes = tuple(int(s) for s in args.sizes.split(","))
    results = bench_mod.run_bench_suite(sizes=sizes, iters=args.iters, seed=args.seed)
    if args.out:
        bench_mod.write_bench_csv(results, args.out)
        print(f"wrote {args.out}")
    by_kind: dict[ActivationKind, list] = {}
    for r in results:
        by_kind.setdefault(r.kind, []).append(r)
    print(f"{'kind':<12}{'size':>10}{'per_call_ns':>14}{'rel_to_relu':>13}")
    for kind, rows in by_kind.items():
        for r in rows:
            print(f"{kind.value:<12}{r.size:>10}{r.per_call_ns:>14.1f}{r.rel_to_relu:>13.3f}")
        if len(rows) >= 3:
            slope, intercept, r2 = bench_mod.linear_fit(rows)
            print(f"{kind.value:<12}linear fit: slope {slope:.4f} ns/elem, r^2 {r2:.5f}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.full_model:
        kind = parse_activation(args.activation) if args.activation else ActivationKind.PILU
        scheme = parse_scheme(args.scheme)
        rng = np.random.default_rng(args.seed)
        model = build_cifar_cnn(10, kind, scheme, rng=rng, dtype=np.float64)
        images = rng.uniform(0.0, 1.0, size=(4, 32, 32, 3))
        labels = rng.integers(0, 10, size=4)
        report = gradient_check(model, images, labels, seed=args.seed, l2_lambda=1e-3)
    else:
        if not args.activation:
            print("error: pass --activation NAME or --full-model", file=sys.stderr)
            return 2
        report = check_activation_gradients(parse_activation(args.activation), seed=args.seed)
    print(report.table())
    if report.passed:
        print(f"PASS: max relative error {report.max_rel_err:.3e} < {report.tol:g}")
        return 0
    failing = ", ".join(e.name for e in report.failures())
    print(f"FAIL: tolerance {report.tol:g} exceeded by {failing}", file=sys.stderr)
    return 1


def cmd_report(args) -> int:
    runs_dir = args.input
    if os.path.isdir(os.path.join(runs_dir, "runs")):
        runs_dir = os.path.join(runs_dir, "runs")
    logs = sorted(
        os.path.join(runs_dir, f) for f in os.listdir(runs_dir) if f.endswith(".jsonl")
    ) if os.path.isdir(runs_dir) else []
    records = []
    for path in logs:
        try:
            records.append(read_run_log(path))
        except ValueError as exc:
            print(f"warning: {exc}", file=sys.stderr)
    if not records:
        print("error: no runs found", file=sys.stderr)
        return 1
    summaries = summarize([r for r in records if r.diverged_epoch is None], strict=False)
    labels = list(summaries)
    baseline = next((l for l in labels if l.startswith("relu-")), labels[0] if labels else None)
    comparisons = [compare(summaries, baseline, l) for l in labels if l != baseline] if baseline else []
    files = emit_report(summaries, comparisons, args.out, records=records)
    for f in files:
        print(f"wrote {f}")
    return 0


def cmd_model_summary(args) -> int:
    num_classes = 100 if args.dataset == "cifar100" else 10
    kind = parse_activation(args.activation)
    scheme = parse_scheme(args.scheme)
    model = build_cifar_cnn(num_classes, kind, scheme, seed=0)
    print(model.summary())
    print(f"total parameters: {count_parameters(model):,}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pilunet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run and write metrics + checkpoint")
    _add_data_flags(p)
    p.add_argument("--activation", choices=ACTIVATION_CHOICES, default="pilu")
    p.add_argument("--scheme", choices=SCHEME_CHOICES, default="channel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--log-level", choices=["metrics", "stats", "full"], default="metrics")
    p.add_argument("--out", default="results")
    p.add_argument("--force", action="store_true", help="retrain even if outputs exist")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("experiment", help="run a multi-seed sweep and write summary CSVs")
    _add_data_flags(p)
    p.add_argument("--config", default=None, help="JSON experiment config file")
    p.add_argument("--activations", default="relu,pilu", help="comma-separated activation names")
    p.add_argument("--schemes", default="channel", help="one scheme, or one per activation")
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--num-seeds", type=int, default=30)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--desk-scale", action="store_true", help="5 seeds x 10 epochs x 5,000-image subset")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.add_argument("--out", default="results")
    p.add_argument("--force", action="store_true", help="recompute completed runs")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("bench", help="time activation forward passes across input sizes")
    p.add_argument("--sizes", default=",".join(str(s) for s in bench_mod.DEFAULT_SIZES))
    p.add_argument("--iters", type=int, default=bench_mod.DEFAULT_ITERS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--activation", choices=ACTIVATION_CHOICES, default=None)
    p.add_argument("--full-model", action="store_true")
    p.add_argument("--scheme", choices=SCHEME_CHOICES, default="channel")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="summary + comparison CSVs from existing metric logs")
    p.add_argument("--in", dest="input", required=True, help="directory of run logs")
    p.add_argument("--out", default="results")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("model-summary", help="print the architecture table and total parameters")
    p.add_argument("--dataset", choices=["cifar10", "cifar100"], default="cifar10")
    p.add_argument("--activation", choices=ACTIVATION_CHOICES, default="relu")
    p.add_argument("--scheme", choices=SCHEME_CHOICES, default="channel")
    p.set_defaults(fn=cmd_model_summary)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
