"""Microbenchmark harness for activation forward passes.

Times the layer-wise scalar-parameter path (parameter lookup under richer
sharing schemes is not included in the timing; noted in the CSV metadata
row). Inputs are pre-generated and warm-up calls are excluded. Each
measurement is the median over several batches of iterations, which
resists scheduler noise better than one long total.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .activations import (
    ActivationKind,
    DoubleReluParams,
    PiluParams,
    PreluParams,
    double_relu_forward,
    pilu_forward,
    prelu_forward,
    rectifier_forward,
)

DEFAULT_SIZES = (100, 1_000, 10_000, 100_000)
DEFAULT_ITERS = 100_000
MIN_BATCH_NS = 10_000  # below this the timer is too coarse; retry with more iters


@dataclass
class BenchResult:
    kind: ActivationKind
    size: int
    iters: int
    total_ns: float
    per_call_ns: float
    rel_to_relu: float = math.nan
    flagged: bool = False


def _forward_fn(kind: ActivationKind):
    if kind is ActivationKind.PILU:
        p = PiluParams(1.5, 0.1, 0.25)
        return lambda x: pilu_forward(x, p)
    if kind is ActivationKind.DOUBLE_RELU:
        p = DoubleReluParams(0.5)
        return lambda x: double_relu_forward(x, p)
    if kind is ActivationKind.PRELU:
        p = PreluParams(0.25)
        return lambda x: prelu_forward(x, p)
    return lambda x: rectifier_forward(x, kind)


def _time_once(fn, x, iters: int, batches: int) -> tuple[int, int]:
    """(median batch duration in ns scaled to all batches, iterations timed)."""
    batch_iters = max(iters // batches, 1)
    durations = []
    for _ in range(batches):
        t0 = time.perf_counter_ns()
        for _ in range(batch_iters):
            fn(x)
        durations.append(time.perf_counter_ns() - t0)
    median = sorted(durations)[len(durations) // 2]
    return median * batches, batch_iters * batches


def bench_activation(
    kind: ActivationKind,
    sizes=DEFAULT_SIZES,
    iters: int = DEFAULT_ITERS,
    seed: int = 0,
    batches: int = 9,
    warmup: int = 5,
) -> list[BenchResult]:
    """Wall-time the forward pass of one activation across input sizes."""
    rng = np.random.default_rng(seed)
    fn = _forward_fn(kind)
    results = []
    for size in sizes:
        x = rng.uniform(-3.0, 3.0, size=size)
        for _ in range(warmup):
            fn(x)
        use_iters, flagged = iters, False
        while True:
            total_ns, effective_iters = _time_once(fn, x, use_iters, batches)
            if total_ns / batches >= MIN_BATCH_NS or use_iters >= iters * 100:
                break
            use_iters *= 10
            flagged = True
        results.append(
            BenchResult(
                kind=kind,
                size=size,
                iters=effective_iters,
                total_ns=float(total_ns),
                per_call_ns=float(total_ns) / effective_iters,
                flagged=flagged,
            )
        )
    return results


def run_bench_suite(
    kinds=None, sizes=DEFAULT_SIZES, iters: int = DEFAULT_ITERS, seed: int = 0
) -> list[BenchResult]:
    """Benchmark several activations and fill in the ratio-to-ReLU column."""
    if kinds is None:
        kinds = [
            ActivationKind.RELU,
            ActivationKind.LRELU,
            ActivationKind.PRELU,
            ActivationKind.DOUBLE_RELU,
            ActivationKind.PILU,
        ]
    if ActivationKind.RELU not in kinds:
        kinds = [ActivationKind.RELU] + list(kinds)
    all_results: list[BenchResult] = []
    relu_per_call: dict[int, float] = {}
    for kind in kinds:
        results = bench_activation(kind, sizes=sizes, iters=iters, seed=seed)
        if kind is ActivationKind.RELU:
            relu_per_call = {r.size: r.per_call_ns for r in results}
        for r in results:
            base = relu_per_call.get(r.size)
            r.rel_to_relu = 1.0 if kind is ActivationKind.RELU else (r.per_call_ns / base if base else math.nan)
        all_results.extend(results)
    return all_results


def linear_fit(results: list[BenchResult]) -> tuple[float, float, float]:
    """Least-squares per_call_ns = slope * size + intercept, plus r squared."""
    if len(results) < 3:
        raise ValueError("need at least 3 sizes for a linear fit")
    x = np.array([r.size for r in results], dtype=np.float64)
    y = np.array([r.per_call_ns for r in results], dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r_squared


def write_bench_csv(results: list[BenchResult], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["# timing: layer-wise scalar parameters, median-of-batches, warm-up excluded"])
        writer.writerow(["kind", "size", "iters", "per_call_ns", "rel_to_relu", "flagged"])
        for r in results:
            writer.writerow([r.kind.value, r.size, r.iters, f"{r.per_call_ns:.2f}", f"{r.rel_to_relu:.4f}", int(r.flagged)])
