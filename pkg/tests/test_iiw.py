"""Gaussian KL, the quadratic moving average, the information estimator, and
the tracked-training loop."""

import numpy as np
import pytest

from weightinfo import (
    GaussianSpec,
    GradientBuffer,
    MovingAverageState,
    NetworkSpec,
    TrackConfig,
    empirical_fim_dense,
    estimate_iiw,
    gaussian_kl,
    pac_bayes_bound,
    synthetic_blobs,
    track_iiw_during_training,
    update_moving_average,
)
from weightinfo.errors import ConfigError, NumericError


def mc_kl(post, prior, num_samples, rng):
    """Monte-Carlo KL through the log-density ratio under the posterior."""

    def log_density(x, spec):
        cov = spec.dense_cov()
        chol = np.linalg.cholesky(cov)
        y = np.linalg.solve(chol, (x - spec.mean).T)
        return -0.5 * (
            np.sum(y * y, axis=0)
            + 2.0 * np.sum(np.log(np.diag(chol)))
            + spec.mean.size * np.log(2 * np.pi)
        )

    chol = np.linalg.cholesky(post.dense_cov())
    draws = post.mean + rng.standard_normal((num_samples, post.mean.size)) @ chol.T
    return float(np.mean(log_density(draws, post) - log_density(draws, prior)))


class TestGaussianKl:
    def test_identical_gaussians(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 3))
        cov = a @ a.T + np.eye(3)
        g = GaussianSpec(rng.standard_normal(3), cov)
        assert gaussian_kl(g, g) == pytest.approx(0.0, abs=1e-12)

    def test_unit_variance_mean_shift(self):
        post = GaussianSpec(np.array([1.0]), np.array([1.0]))
        prior = GaussianSpec(np.array([0.0]), np.array([1.0]))
        assert gaussian_kl(post, prior) == pytest.approx(0.5, abs=1e-14)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 3))
        b = rng.standard_normal((3, 3))
        post = GaussianSpec(rng.standard_normal(3), a @ a.T + 0.5 * np.eye(3))
        prior = GaussianSpec(rng.standard_normal(3), b @ b.T + 0.5 * np.eye(3))
        closed = gaussian_kl(post, prior)
        estimate = mc_kl(post, prior, 1_000_000, rng)
        assert abs(closed - estimate) / closed < 0.02

    def test_diagonal_path_matches_dense(self):
        rng = np.random.default_rng(2)
        dp, dq = rng.uniform(0.5, 2.0, 4), rng.uniform(0.5, 2.0, 4)
        mp, mq = rng.standard_normal(4), rng.standard_normal(4)
        diag = gaussian_kl(GaussianSpec(mp, dp), GaussianSpec(mq, dq))
        dense = gaussian_kl(GaussianSpec(mp, np.diag(dp)), GaussianSpec(mq, np.diag(dq)))
        assert diag == pytest.approx(dense, abs=1e-12)

    def test_nonnegative_on_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            a = rng.standard_normal((4, 4))
            b = rng.standard_normal((4, 4))
            post = GaussianSpec(rng.standard_normal(4), a @ a.T + 0.1 * np.eye(4))
            prior = GaussianSpec(rng.standard_normal(4), b @ b.T + 0.1 * np.eye(4))
            assert gaussian_kl(post, prior) >= 0.0

    def test_non_spd_rejected(self):
        bad = GaussianSpec(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
        ok = GaussianSpec(np.zeros(2), np.eye(2))
        with pytest.raises(NumericError):
            gaussian_kl(bad, ok)

    def test_from_fim_buffer(self):
        rng = np.random.default_rng(4)
        grads = rng.standard_normal((30, 6))
        buf = GradientBuffer(30)
        buf.add_rows(grads)
        spec = GaussianSpec.from_fim_buffer(np.zeros(6), buf, n=50, damping=1e-6)
        expected = np.linalg.inv(empirical_fim_dense(grads) + 1e-6 * np.eye(6)) / 50
        np.testing.assert_allclose(spec.cov, expected, atol=1e-10)


class TestMovingAverage:
    def test_collapse_to_absolute_value(self):
        state = MovingAverageState.zeros(3, rho=0.0, window=1)
        params = np.array([-2.0, 0.5, 3.0])
        update_moving_average(state, params)
        np.testing.assert_allclose(state.theta_bar, np.abs(params), rtol=1e-15)

    def test_constant_trajectory_fixed_point(self):
        state = MovingAverageState.zeros(2, rho=0.9, window=3)
        c = np.array([1.5, -0.5])
        for _ in range(400):
            update_moving_average(state, c)
        np.testing.assert_allclose(state.theta_bar, np.abs(c), rtol=1e-12)

    def test_seeded_state_is_exact_fixed_point(self):
        c = np.array([0.3, -1.2, 0.0])
        state = MovingAverageState.seeded(c, rho=0.99, window=5)
        before = state.theta_bar.copy()
        for _ in range(10):
            update_moving_average(state, c)
        np.testing.assert_array_equal(state.theta_bar, before)

    def test_hand_computed_recursion(self):
        rho, window = 0.9, 2
        v1 = np.array([1.0, -2.0])
        v2 = np.array([0.5, 4.0])
        state = MovingAverageState.zeros(2, rho=rho, window=window)
        update_moving_average(state, v1)
        ms1 = (1 - rho) / window * v1**2
        np.testing.assert_allclose(state.theta_bar, np.sqrt(ms1), atol=1e-12)
        update_moving_average(state, v2)
        ms2 = rho * ms1 + (1 - rho) / window * (v1**2 + v2**2)
        np.testing.assert_allclose(state.theta_bar, np.sqrt(ms2), atol=1e-12)

    def test_bad_rho(self):
        with pytest.raises(ConfigError):
            MovingAverageState.zeros(2, rho=1.0, window=1)


class TestEstimateIiw:
    def filled(self, grads):
        buf = GradientBuffer(len(grads))
        buf.add_rows(grads)
        return buf

    def test_zero_delta(self):
        buf = self.filled(np.random.default_rng(5).standard_normal((7, 4)))
        assert estimate_iiw(np.zeros(4), buf, n=100).value == 0.0

    def test_single_gradient_self_projection(self):
        g = np.array([1.0, 2.0, -1.0])
        buf = self.filled(g[None, :])
        est = estimate_iiw(g, buf, n=1)
        assert est.value == pytest.approx((g @ g) ** 2, rel=1e-14)

    def test_matches_dense_quadratic_form(self):
        rng = np.random.default_rng(6)
        grads = rng.standard_normal((200, 50))
        delta = rng.standard_normal(50)
        n = 640
        buf = self.filled(grads)
        fast = estimate_iiw(delta, buf, n).value
        dense = n * float(delta @ empirical_fim_dense(grads) @ delta)
        assert abs(fast - dense) / abs(dense) <= 1e-10

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        grads = rng.standard_normal((20, 8))
        delta = rng.standard_normal(8)
        perm = rng.permutation(8)
        a = estimate_iiw(delta, self.filled(grads), 32).value
        b = estimate_iiw(delta[perm], self.filled(grads[:, perm]), 32).value
        assert a == pytest.approx(b, rel=1e-12)

    def test_quadratic_scaling_in_gradients(self):
        rng = np.random.default_rng(8)
        grads = rng.standard_normal((15, 6))
        delta = rng.standard_normal(6)
        base = estimate_iiw(delta, self.filled(grads), 10).value
        scaled = estimate_iiw(delta, self.filled(3.0 * grads), 10).value
        assert scaled == pytest.approx(9.0 * base, rel=1e-12)

    def test_empty_buffer_rejected(self):
        with pytest.raises(NumericError):
            estimate_iiw(np.zeros(3), GradientBuffer(5), 10)


class TestPacBayesBound:
    def test_zero_information_zero_bound(self):
        assert pac_bayes_bound(1.0, 100, 0.0) == 0.0

    def test_hand_computed_value(self):
        assert pac_bayes_bound(0.5, 1000, 2.0) == pytest.approx(np.sqrt(0.001), rel=1e-12)

    def test_quadrupling_n_halves_bound(self):
        a = pac_bayes_bound(0.7, 500, 3.0)
        b = pac_bayes_bound(0.7, 2000, 3.0)
        assert a == pytest.approx(2.0 * b, rel=1e-12)

    def test_monotone_in_information(self):
        assert pac_bayes_bound(1.0, 100, 2.0) > pac_bayes_bound(1.0, 100, 1.0)


class TestTracking:
    def blobs_config(self, total_iters=1600, lr=0.05):
        return TrackConfig(
            total_iters=total_iters,
            batch_size=16,
            learning_rate=lr,
            rho=0.99,
            window=10,
            fim_grads=64,
            log_points=40,
            theta0_policy="warmup:16",
        )

    def test_rise_then_fall_on_separable_blobs(self):
        hits = 0
        for seed in range(3):
            rng = np.random.default_rng(seed)
            train = synthetic_blobs(256, 2, 2, 4.0, rng)
            net = NetworkSpec((2, 2), "linear")
            res = track_iiw_during_training(net, train, self.blobs_config(), rng)
            iiws = [e.value for e in res.estimates]
            peak = int(np.argmax(iiws))
            if peak < len(iiws) - 1 and iiws[-1] < iiws[peak]:
                hits += 1
        assert hits >= 2

    def test_zero_learning_rate_zero_information(self):
        rng = np.random.default_rng(10)
        train = synthetic_blobs(128, 2, 2, 2.0, rng)
        net = NetworkSpec((2, 4, 2), "tanh")
        cfg = TrackConfig(
            total_iters=64,
            batch_size=16,
            learning_rate=0.0,
            fim_grads=16,
            log_points=8,
            theta0_policy="warmup:8",
        )
        res = track_iiw_during_training(net, train, cfg, rng)
        assert res.estimates, "expected logged estimates"
        for est in res.estimates:
            assert est.value == 0.0

    def test_same_seed_identical_trajectories(self):
        def run():
            rng = np.random.default_rng(77)
            train = synthetic_blobs(128, 2, 2, 3.0, rng)
            net = NetworkSpec((2, 2), "linear")
            return track_iiw_during_training(net, train, self.blobs_config(total_iters=320), rng)

        a, b = run(), run()
        np.testing.assert_array_equal(a.final_params, b.final_params)
        assert [e.value for e in a.estimates] == [e.value for e in b.estimates]
        assert [(m.iteration, m.train_loss) for m in a.metrics] == [
            (m.iteration, m.train_loss) for m in b.metrics
        ]

    def test_zero_iterations_no_records(self):
        rng = np.random.default_rng(11)
        train = synthetic_blobs(64, 2, 2, 2.0, rng)
        net = NetworkSpec((2, 2), "linear")
        cfg = TrackConfig(total_iters=0, batch_size=8, learning_rate=0.1, fim_grads=4, theta0_policy="init")
        res = track_iiw_during_training(net, train, cfg, rng)
        assert res.metrics == [] and res.estimates == []
