"""Loss, optimizer, the epoch loop, and the finite-difference gradient checker.

Reproducibility contract: one seed drives three independent RNG streams
(weight init, epoch shuffling, dropout), so e.g. changing the batch size
never perturbs initialization. Given (seed, config, dataset), repeated runs
produce bitwise-identical metric records in single-threaded mode.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .activations import ActivationKind, SharingScheme
from .data import Dataset, one_hot
from .network import Activation, Model, build_cifar_cnn

PROB_CLAMP = 1e-12


class NonFiniteGradientError(RuntimeError):
    """Raised by the optimizer when a gradient contains NaN or infinity."""


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    l2_lambda: float = 1e-3
    # With the half convention the penalty is (lambda/2) * sum(w^2).
    l2_half_convention: bool = False
    seed: int = 0
    log_level: str = "metrics"  # metrics | stats | full
    adam: AdamConfig = field(default_factory=AdamConfig)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    error: float


@dataclass
class RunRecord:
    """Per-epoch metrics for one (seed, config) training run."""

    run_id: str
    dataset: str
    activation: str
    scheme: str
    seed: int
    rows: list[MetricsRow] = field(default_factory=list)
    layer_stats: list[dict] = field(default_factory=list)
    diverged_epoch: int | None = None

    def final(self, split: str = "test") -> MetricsRow:
        for row in reversed(self.rows):
            if row.split == split:
                return row
        raise ValueError(f"no rows for split {split!r}")

    def row_dicts(self) -> list[dict]:
        base = {
            "run_id": self.run_id,
            "seed": self.seed,
            "activation": self.activation,
            "scheme": self.scheme,
            "dataset": self.dataset,
        }
        return [{**base, **asdict(row)} for row in self.rows]


def rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, shuffle, dropout) generators derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def categorical_cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """Mean negative log likelihood of the true classes.

    Probabilities are clamped to [PROB_CLAMP, 1] so a confidently wrong
    prediction cannot produce -log(0).
    """
    p_true = (probs * onehot).sum(axis=1)
    return float(-np.log(np.clip(p_true, PROB_CLAMP, 1.0)).mean())


def cross_entropy_grad(probs: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """d(mean NLL)/d(probs); zero where the clamp is active."""
    n = probs.shape[0]
    return np.where(probs > PROB_CLAMP, -onehot / np.maximum(probs, PROB_CLAMP) / n, 0.0)


def l2_penalty(kernel: np.ndarray, lam: float = 1e-3, half_convention: bool = False):
    """Weight-decay penalty on one kernel: (loss_add, grad_add).

    Default convention is lambda * sum(w^2) with gradient 2 * lambda * w;
    the half convention divides both by two.
    """
    scale = 0.5 if half_convention else 1.0
    loss_add = scale * lam * float((kernel ** 2).sum())
    grad_add = (2.0 * scale * lam) * kernel
    return loss_add, grad_add


class Adam:
    """Adam with bias-corrected moments; updates parameters in place."""

    def __init__(self, params: list[np.ndarray], cfg: AdamConfig | None = None, names: list[str] | None = None):
        self.cfg = cfg or AdamConfig()
        self.params = params
        self.names = names or [f"param_{i}" for i in range(len(params))]
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for name, g in zip(self.names, grads):
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient in {name} at step {self.t + 1}")
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * np.square(g)
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def model_loss(model: Model, probs: np.ndarray, onehot: np.ndarray, cfg: TrainConfig) -> float:
    loss = categorical_cross_entropy(probs, onehot)
    if cfg.l2_lambda > 0.0:
        add, _ = l2_penalty(model.output_dense.w, cfg.l2_lambda, cfg.l2_half_convention)
        loss += add
    return loss


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, batch_size: int = 256):
    """Eval-mode loss and accuracy over a full split (dropout off)."""
    n = images.shape[0]
    k = model.config.get("num_classes") or model.output_dense.u_out
    dtype = model.output_dense.w.dtype
    nll_sum = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        x = images[start : start + batch_size].astype(dtype, copy=False)
        y = labels[start : start + batch_size]
        probs = model.forward(x, train=False)
        onehot = one_hot(y, k, dtype=probs.dtype)
        p_true = (probs * onehot).sum(axis=1)
        nll_sum += float(-np.log(np.clip(p_true, PROB_CLAMP, 1.0)).sum())
        correct += int((probs.argmax(axis=1) == y).sum())
    loss = nll_sum / n
    if cfg.l2_lambda > 0.0:
        add, _ = l2_penalty(model.output_dense.w, cfg.l2_lambda, cfg.l2_half_convention)
        loss += add
    return loss, correct / n


def _layer_stat_block(model: Model, epoch: int) -> dict:
    stats = {}
    for ref in model.registry:
        w, g = ref.values, ref.grad
        stats[ref.name] = {
            "w_mean": float(w.mean()),
            "w_std": float(w.std()),
            "w_l2": float(np.linalg.norm(w.ravel())),
            "g_mean": float(g.mean()),
            "g_std": float(g.std()),
            "g_l2": float(np.linalg.norm(g.ravel())),
        }
    return {"epoch": epoch, "layers": stats}


def train_run(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    run_id: str | None = None,
    log_path: str | None = None,
    shuffle_rng: np.random.Generator | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> RunRecord:
    """Train for cfg.epochs epochs, logging metrics for all three splits.

    Each epoch shuffles the training split with the run's seeded stream,
    walks mini-batches through forward/backward/Adam, then evaluates loss
    and accuracy on train/val/test in eval mode. A non-finite loss or
    gradient aborts the run with the epoch of divergence recorded.
    """
    if shuffle_rng is None or dropout_rng is None:
        _, s, d = rng_streams(cfg.seed)
        shuffle_rng = shuffle_rng or s
        dropout_rng = dropout_rng or d

    record = RunRecord(
        run_id=run_id or f"{dataset.name}-{model.config.get('activation', 'model')}-"
        f"{model.config.get('scheme', '')}-seed{cfg.seed}",
        dataset=dataset.name,
        activation=model.config.get("activation", ""),
        scheme=model.config.get("scheme", ""),
        seed=cfg.seed,
    )

    k = dataset.num_classes
    dtype = model.output_dense.w.dtype
    train_idx = dataset.splits["train"]
    params = [ref.values for ref in model.registry]
    names = [ref.name for ref in model.registry]
    optimizer = Adam(params, cfg.adam, names=names)
    out_dense = model.output_dense

    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = train_idx.copy()
            shuffle_rng.shuffle(order)
            diverged = False
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                x = dataset.images[batch].astype(dtype, copy=False)
                y = one_hot(dataset.labels[batch], k, dtype=dtype)
                probs = model.forward(x, train=True, rng=dropout_rng)
                loss = model_loss(model, probs, y, cfg)
                if not math.isfinite(loss):
                    diverged = True
                    break
                model.zero_grads()
                model.backward(cross_entropy_grad(probs, y).astype(dtype, copy=False))
                if cfg.l2_lambda > 0.0:
                    _, g_add = l2_penalty(out_dense.w, cfg.l2_lambda, cfg.l2_half_convention)
                    out_dense.grads[0] += g_add
                try:
                    optimizer.step([ref.grad for ref in model.registry])
                except NonFiniteGradientError:
                    diverged = True
                    break
                model.project_params()

            if diverged:
                record.diverged_epoch = epoch
                if log_fh:
                    log_fh.write(
                        json.dumps(
                            {
                                "event": "diverged",
                                "epoch": epoch,
                                "run_id": record.run_id,
                                "dataset": record.dataset,
                                "activation": record.activation,
                                "scheme": record.scheme,
                                "seed": record.seed,
                            }
                        )
                        + "\n"
                    )
                break

            for split in ("train", "val", "test"):
                idx = dataset.splits[split]
                loss, acc = evaluate(model, dataset.images[idx], dataset.labels[idx], cfg)
                row = MetricsRow(epoch=epoch, split=split, loss=loss, accuracy=acc, error=1.0 - acc)
                record.rows.append(row)
                if log_fh:
                    log_fh.write(json.dumps(record.row_dicts()[-1]) + "\n")
            if cfg.log_level in ("stats", "full"):
                record.layer_stats.append(_layer_stat_block(model, epoch))
                if log_fh and cfg.log_level == "full":
                    log_fh.write(json.dumps({"event": "layer_stats", **record.layer_stats[-1]}) + "\n")
            if log_fh:
                log_fh.flush()
        if log_fh and record.diverged_epoch is None:
            log_fh.write(json.dumps({"event": "complete", "run_id": record.run_id}) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return record


def build_and_train(
    dataset: Dataset,
    kind: ActivationKind,
    scheme: SharingScheme,
    cfg: TrainConfig,
    dtype=np.float32,
    run_id: str | None = None,
    log_path: str | None = None,
) -> tuple[Model, RunRecord]:
    """Standard entry point: seeded init stream, then a full training run."""
    init_rng, shuffle_rng, dropout_rng = rng_streams(cfg.seed)
    model = build_cifar_cnn(dataset.num_classes, kind, scheme, rng=init_rng, dtype=dtype)
    record = train_run(
        model,
        dataset,
        cfg,
        run_id=run_id,
        log_path=log_path,
        shuffle_rng=shuffle_rng,
        dropout_rng=dropout_rng,
    )
    return model, record


# ---------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckEntry:
    name: str
    n_checked: int
    n_skipped: int
    max_rel_err: float
    worst_coord: tuple[int, ...] | None


@dataclass
class GradCheckReport:
    tol: float
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err < self.tol for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_err >= self.tol]

    def table(self) -> str:
        lines = [f"{'parameter':<36}{'checked':>8}{'skipped':>8}{'max rel err':>14}  status"]
        for e in self.entries:
            status = "PASS" if e.max_rel_err < self.tol else "FAIL"
            lines.append(f"{e.name:<36}{e.n_checked:>8}{e.n_skipped:>8}{e.max_rel_err:>14.3e}  {status}")
        return "\n".join(lines)


def _rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    step: float = 1e-5,
    tol: float = 1e-4,
    samples_per_tensor: int = 16,
    seed: int = 0,
    l2_lambda: float = 0.0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs in eval mode and double precision. For each registered parameter
    tensor a seeded sample of coordinates is perturbed by +-step; any
    coordinate whose perturbation flips a piecewise-linear branch (a knot
    crossing, where finite differences are invalid) is skipped and
    reported as such.
    """
    cfg = TrainConfig(l2_lambda=l2_lambda)
    k = model.output_dense.u_out
    onehot = one_hot(labels, k, dtype=np.float64)
    x = images.astype(np.float64, copy=False)

    def loss_at() -> tuple[float, list[np.ndarray]]:
        branches: list[np.ndarray] = []
        probs = model.forward(x, train=False, branch_sink=branches)
        return model_loss(model, probs, onehot, cfg), branches

    # Analytic gradients.
    probs = model.forward(x, train=False)
    model.zero_grads()
    model.backward(cross_entropy_grad(probs, onehot))
    if cfg.l2_lambda > 0.0:
        _, g_add = l2_penalty(model.output_dense.w, cfg.l2_lambda, cfg.l2_half_convention)
        model.output_dense.grads[0] += g_add
    analytic = [ref.grad.copy() for ref in model.registry]

    rng = np.random.default_rng(seed)
    entries = []
    for ref, grad in zip(model.registry, analytic):
        values = ref.values
        flat = values.reshape(-1)
        if flat.size <= samples_per_tensor:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples_per_tensor, replace=False)
        max_err, worst, skipped, checked = 0.0, None, 0, 0
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + step
            loss_plus, br_plus = loss_at()
            flat[ci] = orig - step
            loss_minus, br_minus = loss_at()
            flat[ci] = orig
            if any(not np.array_equal(a, b) for a, b in zip(br_plus, br_minus)):
                skipped += 1
                continue
            fd = (loss_plus - loss_minus) / (2.0 * step)
            err = _rel_err(grad.reshape(-1)[ci], fd)
            checked += 1
            if err > max_err:
                max_err = err
                worst = tuple(int(c) for c in np.unravel_index(ci, values.shape))
        entries.append(GradCheckEntry(ref.name, checked, skipped, max_err, worst))
    return GradCheckReport(tol=tol, entries=entries)


def check_activation_gradients(
    kind: ActivationKind,
    n_points: int = 300,
    step: float = 1e-6,
    tol: float = 1e-6,
    seed: int = 0,
    knot_margin: float = 1e-3,
) -> GradCheckReport:
    """Finite-difference check of one activation's scalar gradients.

    Points are sampled away from the knots (distance > knot_margin) where
    the piecewise-linear derivative is defined; there central differences
    are exact up to roundoff.
    """
    from . import activations as A

    rng = np.random.default_rng(seed)
    x = rng.uniform(-4.0, 4.0, size=n_points)
    entries = []

    if kind is ActivationKind.PILU:
        alpha = rng.uniform(-2.0, 2.0, size=n_points)
        beta = rng.uniform(-2.0, 2.0, size=n_points)
        gamma = rng.uniform(-1.0, 1.0, size=n_points)
        keep = np.abs(x - gamma) > knot_margin
        x, alpha, beta, gamma = x[keep], alpha[keep], beta[keep], gamma[keep]
        p = A.PiluParams(alpha, beta, gamma)
        dx, da, db, dg = A.pilu_backward(x, p, np.ones_like(x))
        grads = {
            "pilu.dx": (dx, lambda h: A.pilu_forward(x + h, p)),
            "pilu.dalpha": (da, lambda h: A.pilu_forward(x, A.PiluParams(alpha + h, beta, gamma))),
            "pilu.dbeta": (db, lambda h: A.pilu_forward(x, A.PiluParams(alpha, beta + h, gamma))),
            "pilu.dgamma": (dg, lambda h: A.pilu_forward(x, A.PiluParams(alpha, beta, gamma + h))),
        }
    elif kind is ActivationKind.DOUBLE_RELU:
        alpha = rng.uniform(0.0, 2.0, size=n_points)
        keep = np.abs(np.abs(x) - alpha) > knot_margin
        x, alpha = x[keep], alpha[keep]
        p = A.DoubleReluParams(alpha)
        dx, da = A.double_relu_backward(x, p, np.ones_like(x))
        grads = {
            "double_relu.dx": (dx, lambda h: A.double_relu_forward(x + h, p)),
            "double_relu.dalpha": (da, lambda h: A.double_relu_forward(x, A.DoubleReluParams(alpha + h))),
        }
    elif kind is ActivationKind.PRELU:
        delta = rng.uniform(-1.0, 1.0, size=n_points)
        keep = np.abs(x) > knot_margin
        x, delta = x[keep], delta[keep]
        p = A.PreluParams(delta)
        dx, dd = A.prelu_backward(x, p, np.ones_like(x))
        grads = {
            "prelu.dx": (dx, lambda h: A.prelu_forward(x + h, p)),
            "prelu.ddelta": (dd, lambda h: A.prelu_forward(x, A.PreluParams(delta + h))),
        }
    elif kind in (ActivationKind.RELU, ActivationKind.LRELU, ActivationKind.LINEAR):
        if kind is not ActivationKind.LINEAR:
            x = x[np.abs(x) > knot_margin]
        dx = {
            ActivationKind.RELU: np.where(x > 0, 1.0, 0.0),
            ActivationKind.LRELU: np.where(x > 0, 1.0, A.LRELU_SLOPE),
            ActivationKind.LINEAR: np.ones_like(x),
        }[kind]
        grads = {f"{kind.value}.dx": (dx, lambda h: A.rectifier_forward(x + h, kind))}
    else:
        raise ValueError(f"no scalar gradient check for {kind}")

    for name, (analytic, f_shift) in grads.items():
        fd_vals = (f_shift(step) - f_shift(-step)) / (2.0 * step)
        errs = np.array([_rel_err(a, f) for a, f in zip(np.ravel(analytic), np.ravel(fd_vals))])
        idx = int(errs.argmax()) if errs.size else 0
        entries.append(
            GradCheckEntry(name, int(errs.size), int(n_points - errs.size), float(errs.max()) if errs.size else 0.0, (idx,))
        )
    return GradCheckReport(tol=tol, entries=entries)
