import json
import math

import numpy as np
import pytest

from pilunet.activations import ActivationKind, SharingScheme
from pilunet.data import make_synthetic, one_hot
from pilunet.network import Softmax, build_cifar_cnn
from pilunet.training import (
    Adam,
    AdamConfig,
    NonFiniteGradientError,
    TrainConfig,
    build_and_train,
    categorical_cross_entropy,
    check_activation_gradients,
    cross_entropy_grad,
    evaluate,
    gradient_check,
    l2_penalty,
    rng_streams,
    train_run,
)

K = ActivationKind
S = SharingScheme


class TestCrossEntropy:
    def test_perfect_prediction_has_zero_loss(self):
        probs = np.array([[1.0, 0.0, 0.0]])
        onehot = np.array([[1.0, 0.0, 0.0]])
        assert categorical_cross_entropy(probs, onehot) == 0.0

    def test_uniform_over_10_classes(self):
        probs = np.full((4, 10), 0.1)
        onehot = one_hot(np.array([0, 3, 5, 9]), 10)
        assert categorical_cross_entropy(probs, onehot) == pytest.approx(math.log(10), rel=1e-12)

    def test_uniform_over_100_classes(self):
        probs = np.full((2, 100), 0.01)
        onehot = one_hot(np.array([7, 42]), 100)
        assert categorical_cross_entropy(probs, onehot) == pytest.approx(math.log(100), rel=1e-12)

    def test_zero_probability_is_clamped(self):
        probs = np.array([[0.0, 1.0]])
        onehot = np.array([[1.0, 0.0]])
        assert categorical_cross_entropy(probs, onehot) == pytest.approx(-math.log(1e-12))

    def test_gradient_matches_finite_differences(self, rng):
        probs = rng.dirichlet(np.ones(5), size=3)
        onehot = one_hot(rng.integers(0, 5, size=3), 5)
        grad = cross_entropy_grad(probs, onehot)
        h = 1e-7
        for idx in np.ndindex(probs.shape):
            pp, pm = probs.copy(), probs.copy()
            pp[idx] += h
            pm[idx] -= h
            fd = (categorical_cross_entropy(pp, onehot) - categorical_cross_entropy(pm, onehot)) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-6, abs=1e-8)


class TestSoftmaxCrossEntropyCombined:
    def test_combined_gradient_is_probs_minus_onehot_over_n(self, rng):
        layer = Softmax()
        logits = rng.normal(size=(6, 10))
        onehot = one_hot(rng.integers(0, 10, size=6), 10)
        probs = layer.forward(logits)
        dlogits = layer.backward(cross_entropy_grad(probs, onehot))
        np.testing.assert_allclose(dlogits, (probs - onehot) / 6, rtol=1e-12, atol=1e-15)

    def test_combined_gradient_matches_finite_differences(self, rng):
        layer = Softmax()
        logits = rng.normal(size=(4, 7))
        onehot = one_hot(rng.integers(0, 7, size=4), 7)
        probs = layer.forward(logits)
        dlogits = layer.backward(cross_entropy_grad(probs, onehot))
        h = 1e-6

        def loss(z):
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return categorical_cross_entropy(e / e.sum(axis=1, keepdims=True), onehot)

        for idx in np.ndindex(logits.shape):
            zp, zm = logits.copy(), logits.copy()
            zp[idx] += h
            zm[idx] -= h
            fd = (loss(zp) - loss(zm)) / (2 * h)
            assert dlogits[idx] == pytest.approx(fd, rel=1e-8, abs=1e-8)


class TestL2Penalty:
    def test_zero_kernel(self):
        loss, grad = l2_penalty(np.zeros((3, 3)))
        assert loss == 0.0 and not grad.any()

    def test_hand_case(self):
        loss, grad = l2_penalty(np.array([1.0, 2.0]), lam=1e-3)
        assert loss == pytest.approx(0.005, rel=1e-12)
        np.testing.assert_allclose(grad, [0.002, 0.004], rtol=1e-12)

    def test_half_convention_halves_both(self):
        loss, grad = l2_penalty(np.array([1.0, 2.0]), lam=1e-3, half_convention=True)
        assert loss == pytest.approx(0.0025, rel=1e-12)
        np.testing.assert_allclose(grad, [0.001, 0.002], rtol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        # Central differences are truncation-free on a quadratic, so a larger
        # step only reduces roundoff.
        w = rng.normal(size=(4, 3))
        _, grad = l2_penalty(w, lam=1e-3)
        h = 1e-4
        for idx in np.ndindex(w.shape):
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (l2_penalty(wp, 1e-3)[0] - l2_penalty(wm, 1e-3)[0]) / (2 * h)
            assert grad[idx] == pytest.approx(fd, rel=1e-8, abs=1e-12)


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        p = np.array([1.0, -2.0, 3.0])
        opt = Adam([p])
        for _ in range(10):
            opt.step([np.zeros_like(p)])
        np.testing.assert_array_equal(p, [1.0, -2.0, 3.0])

    def test_first_step_hand_value(self):
        cfg = AdamConfig()
        p = np.array([0.0])
        Adam([p], cfg).step([np.array([1.0])])
        expected = -cfg.lr * 1.0 / (1.0 + cfg.eps)
        assert abs(p[0] - expected) < 1e-12

    def test_first_step_negative_gradient(self):
        cfg = AdamConfig()
        p = np.array([0.0])
        Adam([p], cfg).step([np.array([-4.0])])
        expected = cfg.lr * 4.0 / (4.0 + cfg.eps)
        assert abs(p[0] - expected) < 1e-12
        assert p[0] == pytest.approx(0.001, rel=1e-6)

    def test_non_finite_gradient_aborts_with_diagnostic(self):
        p = np.array([1.0])
        opt = Adam([p], names=["dense.w"])
        with pytest.raises(NonFiniteGradientError, match="dense.w"):
            opt.step([np.array([np.nan])])

    def test_defaults_match_contract(self):
        cfg = AdamConfig()
        assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (0.001, 0.9, 0.999, 1e-7)


class TestRngStreams:
    def test_streams_are_independent_of_each_other(self):
        init_a, shuffle_a, _ = rng_streams(0)
        init_b, _, _ = rng_streams(0)
        a = init_a.normal(size=8)
        np.testing.assert_array_equal(a, init_b.normal(size=8))
        assert not np.array_equal(a, shuffle_a.normal(size=8))

    def test_different_seeds_differ(self):
        a, _, _ = rng_streams(0)
        b, _, _ = rng_streams(1)
        assert not np.array_equal(a.normal(size=8), b.normal(size=8))


@pytest.fixture(scope="module")
def tiny_dataset():
    return make_synthetic(n=120, k=4, seed=9)


class TestTrainRun:
    def test_zero_epochs_gives_empty_record(self, tiny_dataset):
        model = build_cifar_cnn(4, K.RELU, S.CHANNEL_WISE, dtype=np.float32)
        record = train_run(model, tiny_dataset, TrainConfig(epochs=0, seed=0))
        assert record.rows == []

    def test_identical_seeds_give_bitwise_identical_records(self, tiny_dataset):
        cfg = TrainConfig(epochs=2, batch_size=16, seed=3)
        _, rec_a = build_and_train(tiny_dataset, K.PILU, S.CHANNEL_WISE, cfg)
        _, rec_b = build_and_train(tiny_dataset, K.PILU, S.CHANNEL_WISE, cfg)
        assert rec_a == rec_b
        assert json.dumps(rec_a.row_dicts()) == json.dumps(rec_b.row_dicts())

    def test_different_seeds_differ(self, tiny_dataset):
        _, rec_a = build_and_train(tiny_dataset, K.PILU, S.CHANNEL_WISE, TrainConfig(epochs=1, seed=0))
        _, rec_b = build_and_train(tiny_dataset, K.PILU, S.CHANNEL_WISE, TrainConfig(epochs=1, seed=1))
        assert rec_a != rec_b

    def test_error_is_one_minus_accuracy(self, tiny_dataset):
        _, rec = build_and_train(tiny_dataset, K.RELU, S.CHANNEL_WISE, TrainConfig(epochs=1, seed=0))
        for row in rec.rows:
            assert row.error == 1.0 - row.accuracy

    def test_one_row_per_epoch_and_split(self, tiny_dataset):
        _, rec = build_and_train(tiny_dataset, K.RELU, S.CHANNEL_WISE, TrainConfig(epochs=3, seed=0))
        assert [(r.epoch, r.split) for r in rec.rows] == [
            (e, s) for e in (1, 2, 3) for s in ("train", "val", "test")
        ]

    def test_loss_decreases_over_200_steps(self):
        # 200 optimizer steps on an easily separable synthetic set.
        ds = make_synthetic(n=256, k=4, seed=2)
        cfg = TrainConfig(epochs=25, batch_size=32, seed=0)  # 7 batches/epoch
        model, rec = build_and_train(ds, K.PILU, S.CHANNEL_WISE, cfg)
        train_rows = [r for r in rec.rows if r.split == "train"]
        assert train_rows[-1].loss < train_rows[0].loss

    def test_eval_is_idempotent(self, tiny_dataset):
        model, _ = build_and_train(tiny_dataset, K.RELU, S.CHANNEL_WISE, TrainConfig(epochs=1, seed=0))
        cfg = TrainConfig()
        idx = tiny_dataset.splits["val"]
        first = evaluate(model, tiny_dataset.images[idx], tiny_dataset.labels[idx], cfg)
        second = evaluate(model, tiny_dataset.images[idx], tiny_dataset.labels[idx], cfg)
        assert first == second

    def test_divergence_is_recorded_not_raised(self, tiny_dataset):
        cfg = TrainConfig(epochs=3, seed=0, adam=AdamConfig(lr=1e18))
        with np.errstate(over="ignore", invalid="ignore"):
            _, rec = build_and_train(tiny_dataset, K.PILU, S.CHANNEL_WISE, cfg)
        assert rec.diverged_epoch is not None

    def test_metrics_log_has_completion_marker(self, tiny_dataset, tmp_path):
        log = tmp_path / "run.jsonl"
        build_and_train(
            tiny_dataset, K.RELU, S.CHANNEL_WISE, TrainConfig(epochs=1, seed=0), log_path=str(log)
        )
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert lines[-1]["event"] == "complete"
        assert {l["split"] for l in lines[:-1]} == {"train", "val", "test"}
        required = {"run_id", "seed", "activation", "scheme", "dataset", "epoch", "split", "loss", "accuracy", "error"}
        assert required <= set(lines[0])

    def test_stats_log_level_collects_layer_stats(self, tiny_dataset):
        cfg = TrainConfig(epochs=1, seed=0, log_level="stats")
        _, rec = build_and_train(tiny_dataset, K.RELU, S.CHANNEL_WISE, cfg)
        assert len(rec.layer_stats) == 1
        block = rec.layer_stats[0]["layers"]
        assert any(k.endswith("conv2d.w") for k in block)
        assert {"w_mean", "w_std", "w_l2", "g_mean", "g_std", "g_l2"} <= set(next(iter(block.values())))

    def test_double_relu_alpha_projected_nonnegative(self, tiny_dataset):
        model, _ = build_and_train(
            tiny_dataset, K.DOUBLE_RELU, S.CHANNEL_WISE, TrainConfig(epochs=2, seed=0)
        )
        for ref in model.registry:
            if "activation" in ref.name:
                assert (ref.values[0] >= 0).all()


class TestGradientCheck:
    def test_linear_activation_model_is_exact(self, rng):
        model = build_cifar_cnn(10, K.LINEAR, S.CHANNEL_WISE, rng=rng, dtype=np.float64)
        images = rng.uniform(0, 1, size=(2, 32, 32, 3))
        labels = rng.integers(0, 10, size=2)
        report = gradient_check(model, images, labels, samples_per_tensor=6, tol=1e-4)
        assert report.passed
        # No knots anywhere; the only error left is softmax/NLL truncation.
        assert report.max_rel_err < 1e-6
        assert all(e.n_skipped == 0 for e in report.entries)

    def test_full_model_passes_at_1e4(self, rng):
        model = build_cifar_cnn(10, K.PILU, S.CHANNEL_WISE, rng=rng, dtype=np.float64)
        images = rng.uniform(0, 1, size=(4, 32, 32, 3))
        labels = rng.integers(0, 10, size=4)
        report = gradient_check(model, images, labels, samples_per_tensor=8, l2_lambda=1e-3)
        assert report.passed, report.table()

    def test_corrupted_beta_gradient_is_flagged_on_that_parameter(self, rng):
        model = build_cifar_cnn(10, K.PILU, S.CHANNEL_WISE, rng=rng, dtype=np.float64)
        images = rng.uniform(0, 1, size=(2, 32, 32, 3))
        labels = rng.integers(0, 10, size=2)
        target = next(l for l in model.layers if l.name == "activation")
        orig = target.backward

        def corrupted(dy):
            dx = orig(dy)
            target.grads[0][1] *= 2.0  # double every dbeta contribution
            return dx

        target.backward = corrupted
        report = gradient_check(model, images, labels, samples_per_tensor=64)
        failing = {e.name for e in report.failures()}
        assert failing == {"layer1.activation.activation"}
        assert all(e.worst_coord[0] == 1 for e in report.failures())

    def test_report_table_mentions_every_tensor(self, rng):
        model = build_cifar_cnn(10, K.RELU, S.CHANNEL_WISE, rng=rng, dtype=np.float64)
        images = rng.uniform(0, 1, size=(2, 32, 32, 3))
        report = gradient_check(model, images, rng.integers(0, 10, size=2), samples_per_tensor=2)
        text = report.table()
        for ref in model.registry:
            assert ref.name in text


class TestScalarActivationChecks:
    @pytest.mark.parametrize("kind", [K.PILU, K.DOUBLE_RELU, K.PRELU, K.RELU, K.LRELU])
    def test_analytic_gradients_match_finite_differences(self, kind):
        report = check_activation_gradients(kind)
        assert report.passed, report.table()

    def test_linear_is_essentially_exact(self):
        report = check_activation_gradients(K.LINEAR)
        assert report.max_rel_err < 1e-8
