"""Multi-seed experiment sweeps and across-seed statistics.

A sweep trains one run per (activation, seed) with identical
hyperparameters and preprocessing, so differences in the final metric
distributions are attributable to the activation function alone. Runs are
resumable: a run whose log file ends with a completion record is not
recomputed.

The ``desk`` preset (5 seeds x 10 epochs x 5,000-image stratified subset)
finishes on a laptop CPU; the ``full`` preset (30 seeds x 50 epochs x full
data) is an overnight job.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .activations import ActivationKind, SharingScheme
from .data import Dataset, load_dataset, subset
from .network import build_cifar_cnn, count_parameters
from .training import MetricsRow, RunRecord, TrainConfig, build_and_train

DESK_SEEDS = 5
DESK_EPOCHS = 10
DESK_SUBSET = 5_000
FULL_SEEDS = 30
FULL_EPOCHS = 50

# Expected mean final test accuracy of the full preset (30 seeds x 50
# epochs, channel-wise sharing); used by the overnight verification script.
CIFAR10_FULL_TARGET_ACC = {"relu": 0.6654, "prelu": 0.7081, "double_relu": 0.6849, "pilu": 0.7274}
CIFAR100_FULL_TARGET_ACC = {"relu": 0.2726, "prelu": 0.3376, "double_relu": 0.3339, "pilu": 0.3681}

METRICS = ("loss", "accuracy", "error")


@dataclass
class ExperimentConfig:
    dataset: str = "cifar10"
    activations: list[tuple[ActivationKind, SharingScheme]] = field(
        default_factory=lambda: [(ActivationKind.RELU, SharingScheme.CHANNEL_WISE)]
    )
    seeds: list[int] = field(default_factory=lambda: list(range(FULL_SEEDS)))
    train: TrainConfig = field(default_factory=TrainConfig)
    subset_n: int | None = None
    subset_seed: int = 0
    data_dir: str | None = None
    output_dir: str = "results"
    dtype: str = "float32"
    synthetic_n: int = 512
    synthetic_k: int = 10
    force: bool = False

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    def run_id(self, kind: ActivationKind, scheme: SharingScheme, seed: int) -> str:
        return f"{self.dataset}-{kind.value}-{scheme.value}-seed{seed}"

    def runs_dir(self) -> str:
        return os.path.join(self.output_dir, "runs")


def desk_scale(cfg: ExperimentConfig) -> ExperimentConfig:
    """Shrink a sweep to the laptop-sized preset."""
    return replace(
        cfg,
        seeds=list(range(DESK_SEEDS)),
        train=replace(cfg.train, epochs=DESK_EPOCHS),
        subset_n=DESK_SUBSET,
    )


ACTIVATION_NAMES = {k.value: k for k in ActivationKind}
SCHEME_NAMES = {s.value: s for s in SharingScheme}


def parse_activation(name: str) -> ActivationKind:
    try:
        return ACTIVATION_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATION_NAMES)}")


def parse_scheme(name: str) -> SharingScheme:
    try:
        return SCHEME_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; choose from {sorted(SCHEME_NAMES)}")


def config_from_file(path: str) -> ExperimentConfig:
    """Read an experiment config from a JSON file.

    Recognized keys: dataset, activations, schemes, seeds, epochs,
    batch_size, subset, output_dir, data_dir, l2_lambda, dtype.
    """
    with open(path) as fh:
        raw = json.load(fh)
    activations = raw.get("activations", ["relu"])
    schemes = raw.get("schemes", ["channel"])
    if len(schemes) == 1:
        schemes = schemes * len(activations)
    if len(schemes) != len(activations):
        raise ValueError("schemes must have length 1 or match activations")
    pairs = [(parse_activation(a), parse_scheme(s)) for a, s in zip(activations, schemes)]
    train = TrainConfig(
        epochs=raw.get("epochs", FULL_EPOCHS),
        batch_size=raw.get("batch_size", 32),
        l2_lambda=raw.get("l2_lambda", 1e-3),
    )
    return ExperimentConfig(
        dataset=raw.get("dataset", "cifar10"),
        activations=pairs,
        seeds=list(raw.get("seeds", range(FULL_SEEDS))),
        train=train,
        subset_n=raw.get("subset"),
        data_dir=raw.get("data_dir"),
        output_dir=raw.get("output_dir", "results"),
        dtype=raw.get("dtype", "float32"),
    )


def prepare_dataset(cfg: ExperimentConfig) -> Dataset:
    ds = load_dataset(
        cfg.dataset,
        directory=cfg.data_dir,
        n=cfg.synthetic_n,
        k=cfg.synthetic_k,
    )
    if cfg.subset_n is not None:
        ds = subset(ds, cfg.subset_n, seed=cfg.subset_seed)
    return ds


def run_is_complete(log_path: str) -> bool:
    if not os.path.isfile(log_path):
        return False
    with open(log_path) as fh:
        return any(json.loads(line).get("event") == "complete" for line in fh if line.strip())


def read_run_log(log_path: str) -> RunRecord:
    """Rebuild a RunRecord from its line-delimited metrics log."""
    record = None
    with open(log_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj.get("event") == "diverged" and record is not None:
                record.diverged_epoch = obj["epoch"]
                continue
            if "event" in obj:
                continue
            if record is None:
                record = RunRecord(
                    run_id=obj["run_id"],
                    dataset=obj["dataset"],
                    activation=obj["activation"],
                    scheme=obj["scheme"],
                    seed=obj["seed"],
                )
            record.rows.append(
                MetricsRow(
                    epoch=obj["epoch"],
                    split=obj["split"],
                    loss=obj["loss"],
                    accuracy=obj["accuracy"],
                    error=obj["error"],
                )
            )
    if record is None:
        raise ValueError(f"{log_path}: no metric rows found")
    return record


_WORKER_DATASET: Dataset | None = None
_WORKER_CFG: ExperimentConfig | None = None


def _worker_init(cfg: ExperimentConfig) -> None:
    global _WORKER_DATASET, _WORKER_CFG
    _WORKER_CFG = cfg
    _WORKER_DATASET = prepare_dataset(cfg)


def _worker_run(args: tuple[str, str, int]) -> str:
    kind_name, scheme_name, seed = args
    cfg = _WORKER_CFG
    _execute_run(cfg, _WORKER_DATASET, parse_activation(kind_name), parse_scheme(scheme_name), seed)
    return cfg.run_id(parse_activation(kind_name), parse_scheme(scheme_name), seed)


def _execute_run(
    cfg: ExperimentConfig, ds: Dataset, kind: ActivationKind, scheme: SharingScheme, seed: int
) -> RunRecord:
    run_id = cfg.run_id(kind, scheme, seed)
    log_path = os.path.join(cfg.runs_dir(), f"{run_id}.jsonl")
    train_cfg = replace(cfg.train, seed=seed)
    if os.path.exists(log_path):
        os.remove(log_path)
    _, record = build_and_train(
        ds,
        kind,
        scheme,
        train_cfg,
        dtype=np.dtype(cfg.dtype).type,
        run_id=run_id,
        log_path=log_path,
    )
    return record


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list[RunRecord]:
    """Execute the sweep, skipping runs that already completed."""
    os.makedirs(cfg.runs_dir(), exist_ok=True)
    pending = []
    for kind, scheme in cfg.activations:
        for seed in cfg.seeds:
            run_id = cfg.run_id(kind, scheme, seed)
            log_path = os.path.join(cfg.runs_dir(), f"{run_id}.jsonl")
            if not cfg.force and run_is_complete(log_path):
                continue
            pending.append((kind.value, scheme.value, seed))

    if pending:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init, initargs=(cfg,)) as pool:
                list(pool.map(_worker_run, pending))
        else:
            ds = prepare_dataset(cfg)
            for kind_name, scheme_name, seed in pending:
                _execute_run(cfg, ds, parse_activation(kind_name), parse_scheme(scheme_name), seed)

    records = []
    for kind, scheme in cfg.activations:
        for seed in cfg.seeds:
            log_path = os.path.join(cfg.runs_dir(), f"{cfg.run_id(kind, scheme, seed)}.jsonl")
            records.append(read_run_log(log_path))
    return records


# ---------------------------------------------------------------------------
# Across-seed statistics


@dataclass
class MetricStats:
    mean: float
    std: float
    stderr: float
    min: float
    max: float
    values: list[float]


@dataclass
class DistributionSummary:
    """Final-epoch test-split statistics for one activation."""

    activation: str
    scheme: str
    n_seeds: int
    metrics: dict[str, MetricStats]


@dataclass
class Comparison:
    baseline: str
    challenger: str
    delta_pp: float  # percentage-point accuracy difference of means
    rel_err_improvement: float  # (err_base - err_chal) / err_base
    welch_t: float | None = None
    welch_p: float | None = None
    mannwhitney_u: float | None = None
    mannwhitney_p: float | None = None
    mannwhitney_p_one_sided: float | None = None


def label_of(record: RunRecord) -> str:
    return f"{record.activation}-{record.scheme}"


def _stats_of(values: list[float]) -> MetricStats:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return MetricStats(
        mean=float(arr.mean()),
        std=std,
        stderr=std / float(np.sqrt(arr.size)),
        min=float(arr.min()),
        max=float(arr.max()),
        values=[float(v) for v in arr],
    )


def summarize(
    records: list[RunRecord], split: str = "test", strict: bool = True
) -> dict[str, DistributionSummary]:
    """Across-seed statistics of final-epoch metrics, per activation.

    Diverged runs carry no final epoch and are excluded. Aggregation is
    order-invariant: records are grouped by label and sorted by seed.
    Groups need at least 2 seeds; with strict=False such groups are
    dropped instead of raising.
    """
    groups: dict[str, list[RunRecord]] = {}
    for rec in records:
        if rec.diverged_epoch is not None:
            continue
        groups.setdefault(label_of(rec), []).append(rec)
    summaries = {}
    for label, recs in sorted(groups.items()):
        if len(recs) < 2:
            if strict:
                raise ValueError(f"{label}: need at least 2 seeds to summarize, got {len(recs)}")
            continue
        recs = sorted(recs, key=lambda r: r.seed)
        finals = [r.final(split) for r in recs]
        summaries[label] = DistributionSummary(
            activation=recs[0].activation,
            scheme=recs[0].scheme,
            n_seeds=len(recs),
            metrics={m: _stats_of([getattr(row, m) for row in finals]) for m in METRICS},
        )
    return summaries


def compare(
    summaries: dict[str, DistributionSummary], baseline: str, challenger: str
) -> Comparison:
    """Mean differences plus Welch's t and Mann-Whitney U on the raw seeds.

    The statistical tests need at least two seeds per side; with fewer,
    only the mean-level quantities are reported.
    """
    base, chal = summaries[baseline], summaries[challenger]
    acc_b, acc_c = base.metrics["accuracy"], chal.metrics["accuracy"]
    err_b, err_c = base.metrics["error"], chal.metrics["error"]
    comp = Comparison(
        baseline=baseline,
        challenger=challenger,
        delta_pp=100.0 * (acc_c.mean - acc_b.mean),
        rel_err_improvement=(err_b.mean - err_c.mean) / err_b.mean,
    )
    if len(acc_b.values) >= 2 and len(acc_c.values) >= 2:
        welch = sps.ttest_ind(acc_c.values, acc_b.values, equal_var=False)
        comp.welch_t = float(welch.statistic)
        comp.welch_p = float(welch.pvalue)
        mw = sps.mannwhitneyu(acc_c.values, acc_b.values, alternative="two-sided")
        comp.mannwhitney_u = float(mw.statistic)
        comp.mannwhitney_p = float(mw.pvalue)
        mw_greater = sps.mannwhitneyu(acc_c.values, acc_b.values, alternative="greater")
        comp.mannwhitney_p_one_sided = float(mw_greater.pvalue)
    return comp


def summary_from_means(
    activation: str, accuracy_mean: float, loss_mean: float = 0.0, scheme: str = "channel"
) -> DistributionSummary:
    """Wrap published mean metrics so :func:`compare` can consume them."""
    values = {
        "accuracy": accuracy_mean,
        "error": 1.0 - accuracy_mean,
        "loss": loss_mean,
    }
    return DistributionSummary(
        activation=activation,
        scheme=scheme,
        n_seeds=1,
        metrics={m: MetricStats(v, 0.0, 0.0, v, v, [v]) for m, v in values.items()},
    )


def parameter_counts(cfg: ExperimentConfig) -> dict[str, int]:
    """Total trainable parameters per sweep activation."""
    num_classes = 100 if cfg.dataset == "cifar100" else (cfg.synthetic_k if cfg.dataset == "synthetic" else 10)
    counts = {}
    for kind, scheme in cfg.activations:
        model = build_cifar_cnn(num_classes, kind, scheme, seed=0)
        counts[f"{kind.value}-{scheme.value}"] = count_parameters(model)
    return counts


def emit_report(
    summaries: dict[str, DistributionSummary],
    comparisons: list[Comparison],
    out_dir: str,
    records: list[RunRecord] | None = None,
    param_counts: dict[str, int] | None = None,
) -> list[str]:
    """Write raw per-seed metrics, the summary table, and comparisons as CSV."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    if records is not None:
        raw_path = os.path.join(out_dir, "raw_final_metrics.csv")
        with open(raw_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run_id", "dataset", "activation", "scheme", "seed", "loss", "accuracy", "error"])
            for rec in sorted(records, key=lambda r: r.run_id):
                if rec.diverged_epoch is not None:
                    continue
                row = rec.final("test")
                writer.writerow(
                    [rec.run_id, rec.dataset, rec.activation, rec.scheme, rec.seed, row.loss, row.accuracy, row.error]
                )
        written.append(raw_path)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["activation", "scheme", "n_seeds"]
        for m in METRICS:
            header += [f"{m}_mean", f"{m}_std", f"{m}_stderr", f"{m}_min", f"{m}_max"]
        header.append("parameters")
        writer.writerow(header)
        for label, s in sorted(summaries.items()):
            row = [s.activation, s.scheme, s.n_seeds]
            for m in METRICS:
                ms = s.metrics[m]
                row += [ms.mean, ms.std, ms.stderr, ms.min, ms.max]
            row.append((param_counts or {}).get(label, ""))
            writer.writerow(row)
    written.append(summary_path)

    comp_path = os.path.join(out_dir, "comparisons.csv")
    with open(comp_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "baseline",
                "challenger",
                "delta_pp",
                "rel_err_improvement",
                "welch_t",
                "welch_p",
                "mannwhitney_u",
                "mannwhitney_p",
                "mannwhitney_p_one_sided",
            ]
        )
        for c in comparisons:
            writer.writerow(
                [
                    c.baseline,
                    c.challenger,
                    c.delta_pp,
                    c.rel_err_improvement,
                    c.welch_t,
                    c.welch_p,
                    c.mannwhitney_u,
                    c.mannwhitney_p,
                    c.mannwhitney_p_one_sided,
                ]
            )
    written.append(comp_path)
    return written
