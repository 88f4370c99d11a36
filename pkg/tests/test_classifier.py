import math

import numpy as np
import pytest

from conftest import central_diff, rel_err
from taskrel.classifier import (
    SoftmaxClassifier,
    TrainConfig,
    accuracy,
    average_loss,
    class_mean_losses,
    cross_entropy_loss,
    grad_norm_wrt_input,
    input_gradients,
    max_grad_norms,
    penalized_objective,
    per_sample_losses,
    reweighted_loss,
    softmax,
    train_lipschitz_softmax,
)
from taskrel.dataset import EmbeddingDataset, StandardizationStats, empirical_prior
from taskrel.errors import InputError


def random_probe(rng, K=4, d=3, scale=1.0):
    return SoftmaxClassifier(rng.normal(size=(K, d)) * scale, rng.normal(size=K))


class TestCrossEntropy:
    @pytest.mark.parametrize("K", [2, 10])
    def test_uniform(self, K):
        h = SoftmaxClassifier(np.zeros((K, 3)), np.zeros(K))
        assert cross_entropy_loss(h, [1.0, -2.0, 5.0], 1) == pytest.approx(math.log(K))

    def test_confident_logits(self):
        h = SoftmaxClassifier(np.zeros((2, 1)), np.array([10.0, 0.0]))
        expected = -math.log(math.exp(10) / (math.exp(10) + 1))
        assert cross_entropy_loss(h, [0.0], 0) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(4.54e-5, rel=1e-3)

    def test_stable_for_huge_logits(self):
        h = SoftmaxClassifier(np.zeros((2, 1)), np.array([1e4, 0.0]))
        assert cross_entropy_loss(h, [0.0], 1) == pytest.approx(1e4)
        assert cross_entropy_loss(h, [0.0], 0) == 0.0

    def test_label_out_of_range(self):
        h = SoftmaxClassifier(np.zeros((2, 1)), np.zeros(2))
        with pytest.raises(InputError):
            cross_entropy_loss(h, [0.0], 2)

    def test_probs_on_simplex_and_shift_invariant(self, rng):
        S = rng.normal(size=(50, 6)) * 20
        P = softmax(S)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(softmax(S + 123.0), P, atol=1e-12)


class TestInputGradient:
    def test_zero_weights(self):
        h = SoftmaxClassifier(np.zeros((3, 2)), np.ones(3))
        assert grad_norm_wrt_input(h, [1.0, 1.0], 0) == 0.0

    def test_hand_example(self):
        h = SoftmaxClassifier(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.zeros(2))
        np.testing.assert_allclose(input_gradients(h, [[0.0, 0.0]], [0])[0], [-1.0, 0.0])
        assert grad_norm_wrt_input(h, [0.0, 0.0], 0) == pytest.approx(1.0)

    def test_finite_differences(self, rng):
        for _ in range(100):
            h = random_probe(rng)
            z = rng.normal(size=3)
            y = int(rng.integers(4))
            fd = central_diff(lambda x: cross_entropy_loss(h, x, y), z, h=1e-5)
            assert rel_err(input_gradients(h, z, y)[0], fd) <= 1e-5

    def test_max_over_labels(self, rng):
        h = random_probe(rng, K=5, d=4)
        Z = rng.normal(size=(7, 4))
        brute = np.array([[np.linalg.norm(input_gradients(h, z, k)[0]) for k in range(5)]
                          for z in Z]).max(axis=1)
        np.testing.assert_allclose(max_grad_norms(h, Z), brute, rtol=1e-10)


class TestLosses:
    def test_single_sample(self, rng):
        h = random_probe(rng)
        ds = EmbeddingDataset(rng.normal(size=(1, 3)), [2], 4)
        assert average_loss(h, ds) == cross_entropy_loss(h, ds.features[0], 2)

    def test_uniform_predictor(self, rng):
        h = SoftmaxClassifier(np.zeros((5, 3)), np.zeros(5))
        ds = EmbeddingDataset(rng.normal(size=(30, 3)), rng.integers(0, 5, 30), 5)
        assert average_loss(h, ds) == pytest.approx(math.log(5))

    def test_duplicated_dataset(self, rng):
        h = random_probe(rng)
        ds = EmbeddingDataset(rng.normal(size=(11, 3)), rng.integers(0, 4, 11), 4)
        dup = EmbeddingDataset(np.vstack([ds.features] * 2), np.tile(ds.labels, 2), 4)
        assert average_loss(h, dup) == pytest.approx(average_loss(h, ds), rel=1e-14)

    def test_reweighted_with_empirical_prior(self, rng):
        h = random_probe(rng)
        ds = EmbeddingDataset(rng.normal(size=(40, 3)), rng.integers(0, 4, 40), 4)
        assert reweighted_loss(h, ds, empirical_prior(ds)) == pytest.approx(
            average_loss(h, ds), abs=1e-12 * ds.n)

    def test_reweighted_point_mass(self, rng):
        h = random_probe(rng, K=2)
        labels = np.array([0, 1] * 10)
        ds = EmbeddingDataset(rng.normal(size=(20, 3)), labels, 2)
        losses = per_sample_losses(h, ds.features, ds.labels)
        assert reweighted_loss(h, ds, [1.0, 0.0]) == pytest.approx(losses[labels == 0].mean())

    def test_reweighted_missing_class(self, rng):
        h = random_probe(rng, K=2)
        ds = EmbeddingDataset(rng.normal(size=(4, 3)), [0, 0, 0, 0], 2)
        with pytest.raises(InputError):
            reweighted_loss(h, ds, [0.5, 0.5])

    def test_class_mean_losses(self, rng):
        h = random_probe(rng, K=3)
        ds = EmbeddingDataset(rng.normal(size=(12, 3)), [0, 1] * 6, 3)
        L = class_mean_losses(h, ds)
        assert L[2] == 0.0
        D = np.array([0.3, 0.7, 0.0])
        assert D @ L == pytest.approx(reweighted_loss(h, ds, D))


class TestPenalizedObjective:
    def test_gradient_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            K, d, n = int(rng.integers(2, 5)), int(rng.integers(1, 5)), 6
            W, b = rng.normal(size=(K, d)), rng.normal(size=K)
            Z, y = rng.normal(size=(n, d)), rng.integers(0, K, n)
            tau, rho = 0.3, 10.0
            _, _, gW, gb, norms = penalized_objective(W, b, Z, y, tau, rho)
            if np.min(np.abs(norms - tau)) < 1e-3:
                continue                # too close to the hinge kink
            fW = central_diff(lambda x: penalized_objective(x, b, Z, y, tau, rho)[0], W)
            fb = central_diff(lambda x: penalized_objective(W, x, Z, y, tau, rho)[0], b)
            worst = max(worst, rel_err(gW, fW), rel_err(gb, fb))
        assert worst <= 1e-4

    def test_no_penalty_below_budget(self, rng):
        W, b = rng.normal(size=(3, 2)) * 1e-3, np.zeros(3)
        Z, y = rng.normal(size=(5, 2)), rng.integers(0, 3, 5)
        value, ce, *_ = penalized_objective(W, b, Z, y, tau=1.0, rho=1e4)
        assert value == ce


class TestTraining:
    def test_separable_1d(self):
        r = np.random.default_rng(0)
        y = np.repeat([0, 1], 100)
        X = np.where(y == 0, -3.0, 3.0)[:, None] + 0.1 * r.normal(size=(200, 1))
        ds = EmbeddingDataset(X, y, 2)
        h = train_lipschitz_softmax(ds, TrainConfig(tau=100.0, epochs=300, batch_size=50,
                                                    learning_rate=0.1))
        assert accuracy(h, ds) == 1.0
        assert average_loss(h, ds) < 0.1

    def test_tau_zero_gives_uniform(self, small_task):
        ds, _ = small_task
        h = train_lipschitz_softmax(ds, TrainConfig(tau=0.0, epochs=200, batch_size=ds.n))
        assert abs(average_loss(h, ds) - math.log(ds.K)) <= 0.05

    def test_budget_respected(self, small_task):
        ds, h = small_task
        assert h.info["max_grad_norm"] <= 0.021
        assert h.info["frac_above_1.05tau"] <= 0.01

    def test_deterministic(self, small_task):
        ds, _ = small_task
        cfg = TrainConfig(epochs=5, batch_size=64, seed=3)
        a, b = train_lipschitz_softmax(ds, cfg), train_lipschitz_softmax(ds, cfg)
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)

    def test_divergence_reported(self, small_task):
        from taskrel.errors import DivergenceError
        ds, _ = small_task
        with pytest.raises(DivergenceError):
            train_lipschitz_softmax(ds, TrainConfig(tau=0.0, rho=1e4, learning_rate=10.0,
                                                    momentum=0.0, epochs=50, batch_size=ds.n))

    @pytest.mark.parametrize("kw", [dict(tau=-1), dict(rho=-1), dict(epochs=0),
                                    dict(batch_size=0), dict(learning_rate=0.0)])
    def test_config_validation(self, kw):
        with pytest.raises(InputError):
            TrainConfig(**kw)

    def test_auto_learning_rate(self):
        assert TrainConfig().lr == pytest.approx(2.5e-5)
        assert TrainConfig(rho=0.0).lr == 0.1
        assert TrainConfig(learning_rate=0.3).lr == 0.3


class TestSerialization:
    def test_json_round_trip(self, rng):
        h = random_probe(rng)
        h.stats = StandardizationStats(np.arange(3.0), np.ones(3) * 2)
        back = SoftmaxClassifier.from_json(h.to_json())
        np.testing.assert_allclose(back.weights, h.weights, rtol=1e-6)
        np.testing.assert_allclose(back.stats.std, 2.0)

    def test_malformed(self):
        with pytest.raises(InputError):
            SoftmaxClassifier.from_json('{"d": 1, "K": 1}')
