"""Network forward/backward correctness against finite differences and
hand-computed cases."""

import numpy as np
import pytest

from weightinfo import (
    NetworkSpec,
    OptimizerState,
    accuracy,
    apply_dropout,
    cross_entropy,
    forward,
    init_params,
    loss_and_grad,
    optimizer_step,
    per_sample_grads,
)
from weightinfo.convex import gd_minimize, weighted_objective
from weightinfo.data import Dataset
from weightinfo.errors import ConfigError, ShapeError
from weightinfo.nets import pack_params, softmax


def fd_gradient(net, params, x, y, h=1e-6, clip=None):
    """Central-difference gradient of the mean loss, the reference oracle."""
    g = np.zeros_like(params)
    for j in range(params.size):
        up = params.copy()
        up[j] += h
        down = params.copy()
        down[j] -= h
        g[j] = (
            cross_entropy(forward(net, up, x), y, clip=clip)
            - cross_entropy(forward(net, down, x), y, clip=clip)
        ) / (2 * h)
    return g


def rel_error(a, b):
    scale = np.abs(b).max()
    return np.abs(a - b).max() / (scale + 1e-12)


class TestForward:
    def test_identity_single_layer(self):
        net = NetworkSpec((1, 1), "linear")
        params = np.array([1.0, 0.0])  # weight 1, bias 0
        logits = forward(net, params, np.array([[2.0]]))
        assert logits[0, 0] == 2.0

    def test_zero_params_zero_logits(self):
        net = NetworkSpec((4, 6, 3), "relu")
        logits = forward(net, np.zeros(net.num_params), np.ones((5, 4)))
        np.testing.assert_array_equal(logits, 0.0)

    def test_matches_naive_layer_by_layer(self):
        # the test packs its own matrices, exercising the documented layout
        rng = np.random.default_rng(7)
        net = NetworkSpec((3, 5, 4, 2), "tanh")
        mats = [
            (rng.standard_normal((3, 5)), rng.standard_normal(5)),
            (rng.standard_normal((5, 4)), rng.standard_normal(4)),
            (rng.standard_normal((4, 2)), rng.standard_normal(2)),
        ]
        params = pack_params(net, mats)
        x = rng.standard_normal((6, 3))
        a = np.tanh(x @ mats[0][0] + mats[0][1])
        a = np.tanh(a @ mats[1][0] + mats[1][1])
        expected = a @ mats[2][0] + mats[2][1]
        np.testing.assert_allclose(forward(net, params, x), expected, atol=1e-12)

    def test_shape_error(self):
        net = NetworkSpec((3, 2), "linear")
        with pytest.raises(ShapeError):
            forward(net, np.zeros(net.num_params), np.ones((2, 4)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(np.zeros((4, 10)), np.array([0, 3, 5, 9]))
        np.testing.assert_allclose(loss, np.log(10.0), rtol=1e-12)

    def test_large_margin_drives_loss_to_zero(self):
        labels = np.array([1])
        previous = np.inf
        for margin in (5.0, 15.0, 40.0):
            logits = np.array([[0.0, margin]])
            loss = cross_entropy(logits, labels)
            assert loss < previous
            previous = loss
        assert previous < 1e-15

    def test_clip_means_clipped_losses(self):
        # two-class logits chosen so the raw per-sample losses are 0.5 and 3.0
        z1 = np.log(np.exp(0.5) - 1.0)
        z2 = np.log(np.exp(3.0) - 1.0)
        logits = np.array([[0.0, z1], [0.0, z2]])
        labels = np.array([0, 0])
        np.testing.assert_allclose(cross_entropy(logits, labels), (0.5 + 3.0) / 2, rtol=1e-12)
        np.testing.assert_allclose(cross_entropy(logits, labels, clip=1.0), (0.5 + 1.0) / 2, rtol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ShapeError):
            cross_entropy(np.zeros((1, 3)), np.array([3]))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        probs = softmax(rng.standard_normal((50, 7)) * 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


class TestLossAndGrad:
    @pytest.mark.parametrize("activation", ["linear", "tanh", "relu", "sigmoid"])
    def test_matches_finite_differences(self, activation):
        rng = np.random.default_rng(11)
        net = NetworkSpec((4, 6, 5, 3), activation)
        params = init_params(net, rng)
        x = rng.standard_normal((8, 4))
        y = rng.integers(0, 3, 8)
        _, g = loss_and_grad(net, params, x, y)
        assert rel_error(g, fd_gradient(net, params, x, y)) <= 1e-6

    @pytest.mark.parametrize("activation", ["linear", "tanh", "relu", "sigmoid"])
    def test_four_layer_finite_differences(self, activation):
        rng = np.random.default_rng(13)
        net = NetworkSpec((3, 5, 4, 4, 2), activation)
        params = init_params(net, rng)
        x = rng.standard_normal((6, 3))
        y = rng.integers(0, 2, 6)
        _, g = loss_and_grad(net, params, x, y)
        assert rel_error(g, fd_gradient(net, params, x, y)) <= 1e-6

    def test_clipped_samples_contribute_zero_gradient(self):
        rng = np.random.default_rng(5)
        net = NetworkSpec((2, 3), "linear")
        params = init_params(net, rng) + 1.0  # push some losses above the bound
        x = rng.standard_normal((12, 2)) * 3
        y = rng.integers(0, 3, 12)
        clip = 1.0
        _, g = loss_and_grad(net, params, x, y, clip=clip)
        assert rel_error(g, fd_gradient(net, params, x, y, clip=clip)) <= 1e-6

    def test_gradient_near_zero_at_convex_optimum(self):
        rng = np.random.default_rng(2)
        net = NetworkSpec((1, 2), "linear")
        x = rng.standard_normal((40, 1))
        y = (x[:, 0] > 0).astype(int)
        ds = Dataset(x, y, 2)
        opt = gd_minimize(lambda p: weighted_objective(net, p, ds, None, 0.1), np.zeros(net.num_params))
        _, g = loss_and_grad(net, opt, x, y)
        # the CE part of the gradient cancels the L2 pull exactly at the optimum
        assert np.linalg.norm(g + 0.1 * opt) <= 1e-8

    def test_gradient_linear_in_sample_weights(self):
        rng = np.random.default_rng(9)
        net = NetworkSpec((3, 4, 2), "tanh")
        params = init_params(net, rng)
        x = rng.standard_normal((7, 3))
        y = rng.integers(0, 2, 7)
        _, g1 = loss_and_grad(net, params, x, y, sample_weights=np.ones(7))
        _, g2 = loss_and_grad(net, params, x, y, sample_weights=np.full(7, 2.0))
        np.testing.assert_array_equal(g2, 2.0 * g1)


class TestPerSampleGrads:
    def test_single_sample_equals_batch(self):
        rng = np.random.default_rng(21)
        net = NetworkSpec((3, 4, 2), "sigmoid")
        params = init_params(net, rng)
        x = rng.standard_normal((1, 3))
        y = np.array([1])
        rows = per_sample_grads(net, params, x, y)
        _, g = loss_and_grad(net, params, x, y)
        np.testing.assert_allclose(rows[0], g, atol=1e-14)

    def test_duplicated_sample_identical_rows(self):
        rng = np.random.default_rng(22)
        net = NetworkSpec((3, 2), "linear")
        params = init_params(net, rng)
        x = np.tile(rng.standard_normal((1, 3)), (4, 1))
        y = np.array([1, 1, 1, 1])
        rows = per_sample_grads(net, params, x, y)
        for row in rows[1:]:
            np.testing.assert_array_equal(row, rows[0])

    def test_row_mean_equals_batch_gradient(self):
        rng = np.random.default_rng(23)
        net = NetworkSpec((5, 6, 4), "relu")
        params = init_params(net, rng)
        x = rng.standard_normal((16, 5))
        y = rng.integers(0, 4, 16)
        rows = per_sample_grads(net, params, x, y)
        _, g = loss_and_grad(net, params, x, y)
        np.testing.assert_allclose(rows.mean(axis=0), g, atol=1e-12)


class TestOptimizer:
    def test_sgd_exact_step(self):
        state = OptimizerState("sgd", 0.1)
        params = np.array([1.0, -2.0, 0.5])
        new, _ = optimizer_step(state, params, np.ones(3))
        np.testing.assert_array_equal(new, params - 0.1)

    def test_zero_gradient_is_fixed_point(self):
        state = OptimizerState("sgd", 0.3)
        params = np.array([0.2, -0.7])
        new, _ = optimizer_step(state, params, np.zeros(2))
        np.testing.assert_array_equal(new, params)

    def test_sgd_affine_in_gradient(self):
        params = np.array([1.0, 2.0])
        g1, g2 = np.array([0.5, -1.0]), np.array([-0.25, 2.0])
        lr = 0.2
        s = OptimizerState("sgd", lr)
        out_sum, _ = optimizer_step(s, params, g1 + g2)
        np.testing.assert_allclose(out_sum, params - lr * g1 - lr * g2, atol=1e-15)

    def test_adam_first_step_formula(self):
        lr = 0.01
        state = OptimizerState("adam", lr)
        params = np.zeros(4)
        g = np.array([0.3, -0.02, 5.0, -7.0])
        new, _ = optimizer_step(state, params, g)
        # after bias correction at step 1: m_hat = g, v_hat = g^2
        expected = params - lr * g / (np.abs(g) + state.eps)
        np.testing.assert_allclose(new, expected, atol=1e-15)
        assert np.all(np.abs(new + lr * np.sign(g)) < 1e-5)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            OptimizerState("sgd", -1.0)
        with pytest.raises(ConfigError):
            OptimizerState("rmsprop", 0.1)


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = np.array([1.0, -2.0, 3.0])
        out = apply_dropout(x, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, x)

    def test_mean_preserved_large_vector(self):
        rng = np.random.default_rng(42)
        out = apply_dropout(np.ones(1_000_000), 0.5, rng)
        assert abs(out.mean() - 1.0) < 0.01

    def test_fixed_seed_fixed_mask(self):
        x = np.ones(1000)
        a = apply_dropout(x, 0.3, np.random.default_rng(5))
        b = apply_dropout(x, 0.3, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_rate_one_rejected(self):
        with pytest.raises(ConfigError):
            apply_dropout(np.ones(3), 1.0, np.random.default_rng(0))

    def test_dropout_gradient_matches_finite_differences(self):
        # identical rng seeds give identical masks, so FD is well defined
        net = NetworkSpec((3, 8, 2), "tanh")
        rng = np.random.default_rng(17)
        params = init_params(net, rng)
        x = rng.standard_normal((5, 3))
        y = rng.integers(0, 2, 5)
        rate, seed = 0.4, 99

        def loss_at(p):
            l, _ = loss_and_grad(net, p, x, y, dropout_rate=rate, rng=np.random.default_rng(seed))
            return l

        _, g = loss_and_grad(net, params, x, y, dropout_rate=rate, rng=np.random.default_rng(seed))
        h = 1e-6
        fd = np.zeros_like(params)
        for j in range(params.size):
            up = params.copy()
            up[j] += h
            down = params.copy()
            down[j] -= h
            fd[j] = (loss_at(up) - loss_at(down)) / (2 * h)
        assert rel_error(g, fd) <= 1e-6


class TestAccuracy:
    def test_perfect_predictor(self):
        net = NetworkSpec((3, 3), "linear")
        params = pack_params(net, [(np.eye(3), np.zeros(3))])
        x = np.eye(3)[[0, 1, 2, 0]]
        assert accuracy(net, params, x, np.array([0, 1, 2, 0])) == 1.0

    def test_constant_predictor_balanced(self):
        net = NetworkSpec((4, 10), "linear")
        params = np.zeros(net.num_params)  # all-zero logits, argmax tie -> class 0
        x = np.ones((100, 4))
        labels = np.repeat(np.arange(10), 10)
        assert accuracy(net, params, x, labels) == pytest.approx(0.1)

    def test_hand_counted_case(self):
        net = NetworkSpec((2, 2), "linear")
        params = pack_params(net, [(np.eye(2), np.zeros(2))])
        x = np.array([[2.0, 1.0], [0.0, 3.0], [1.0, 1.0], [-1.0, 0.5]])
        # argmaxes: 0, 1, 0 (tie -> lowest), 1; labels below make 3 of 4 correct
        labels = np.array([0, 1, 1, 1])
        assert accuracy(net, params, x, labels) == pytest.approx(0.75)

    def test_empty_dataset_rejected(self):
        net = NetworkSpec((2, 2), "linear")
        with pytest.raises(ShapeError):
            accuracy(net, np.zeros(net.num_params), np.zeros((0, 2)), np.zeros(0, dtype=int))


class TestDeterminism:
    def test_init_reproducible(self):
        net = NetworkSpec((10, 20, 5), "relu")
        a = init_params(net, np.random.default_rng(123))
        b = init_params(net, np.random.default_rng(123))
        np.testing.assert_array_equal(a, b)

    def test_init_bounds(self):
        net = NetworkSpec((100, 50), "relu")
        params = init_params(net, np.random.default_rng(0))
        bound = np.sqrt(6.0 / 150.0)
        weights = params[: 100 * 50]
        biases = params[100 * 50 :]
        assert np.abs(weights).max() <= bound
        np.testing.assert_array_equal(biases, 0.0)
