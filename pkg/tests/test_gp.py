"""GP oracle: hand-evaluated log-likelihoods, posterior limits, the naive
dense-solve cross-check, and the finite-difference routine itself."""

import numpy as np
import pytest

from covgram.gp import (
    GpModel,
    IndefiniteKernelError,
    LinearKernel,
    RbfKernel,
    _chol_with_jitter,
    finite_difference_gradient,
    gp_posterior,
    log_marginal_likelihood,
)

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def naive_log_likelihood(model, x, y):
    """Dense inverse/determinant evaluation, independent of the Cholesky path."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    k = model.kernel(x, x) + model.noise_var * np.eye(len(y))
    sign, logdet = np.linalg.slogdet(k)
    assert sign > 0
    return float(-0.5 * y @ np.linalg.inv(k) @ y - 0.5 * logdet - 0.5 * len(y) * np.log(2 * np.pi))


class TestLogLikelihood:
    def test_single_zero_observation(self):
        model = GpModel(kernel=RbfKernel(), noise_var=0.0)
        ll = log_marginal_likelihood(model, np.array([[0.0]]), np.array([0.0]))
        assert abs(ll - (-HALF_LOG_2PI)) < 1e-5
        assert abs(ll - (-0.9189385332046727)) < 1e-9

    def test_single_unit_observation(self):
        model = GpModel(kernel=RbfKernel(), noise_var=0.0)
        ll = log_marginal_likelihood(model, np.array([[0.0]]), np.array([1.0]))
        assert abs(ll - (-0.5 - HALF_LOG_2PI)) < 1e-9

    def test_zero_targets_zero_quadratic_term_only(self, rng):
        x = rng.normal(size=(5, 1))
        y = rng.normal(size=5)
        model = GpModel(kernel=RbfKernel(lengthscale=0.7), noise_var=0.1)
        ll_zero = log_marginal_likelihood(model, x, np.zeros(5))
        ll = log_marginal_likelihood(model, x, y)
        # Same determinant and constant; difference is exactly the quadratic.
        k = model.kernel(x, x) + 0.1 * np.eye(5)
        quad = 0.5 * y @ np.linalg.inv(k) @ y
        assert abs((ll_zero - ll) - quad) < 1e-9

    def test_matches_naive_dense_oracle_up_to_n50(self, rng):
        for n in (3, 17, 50):
            x = rng.normal(size=(n, 2))
            y = rng.normal(size=n)
            model = GpModel(kernel=RbfKernel(lengthscale=1.3, signal_var=0.8), noise_var=0.05)
            a = log_marginal_likelihood(model, x, y)
            b = naive_log_likelihood(model, x, y)
            assert abs(a - b) <= 1e-8 * max(abs(a), abs(b))

    def test_noise_fit_direction(self):
        rng = np.random.default_rng(7)
        x = np.linspace(0, 1, 20)[:, None]
        y = 3.0 * rng.normal(size=20)  # pure noise at scale 3
        matched = GpModel(kernel=RbfKernel(), noise_var=9.0)
        mismatched = GpModel(kernel=RbfKernel(), noise_var=1e-4)
        assert log_marginal_likelihood(matched, x, y) > log_marginal_likelihood(mismatched, x, y)

    def test_empty_targets_rejected(self):
        model = GpModel(kernel=RbfKernel())
        with pytest.raises(ValueError):
            log_marginal_likelihood(model, np.zeros((0, 1)), np.zeros(0))


class TestPosterior:
    def test_interpolates_training_point_in_low_noise_limit(self):
        model = GpModel(kernel=RbfKernel(), noise_var=1e-10)
        x = np.array([[0.0], [1.0], [2.5]])
        y = np.array([1.0, -2.0, 0.5])
        mean, var = gp_posterior(model, x, y, x)
        np.testing.assert_allclose(mean, y, atol=1e-6)
        assert np.all(var < 1e-6)

    def test_empty_training_set_gives_prior(self):
        model = GpModel(kernel=RbfKernel(signal_var=2.0), noise_var=0.5)
        mean, var = gp_posterior(model, np.zeros((0, 1)), np.zeros(0), np.array([[0.0], [3.0]]))
        np.testing.assert_array_equal(mean, [0.0, 0.0])
        np.testing.assert_allclose(var, [2.5, 2.5])

    def test_three_point_fixture_matches_naive_solve(self, rng):
        x = np.array([[0.0], [1.0], [2.0]])
        y = np.array([0.5, -1.0, 2.0])
        xs = np.array([[0.5], [1.5], [3.0]])
        model = GpModel(kernel=RbfKernel(lengthscale=0.9), noise_var=0.01)
        mean, var = gp_posterior(model, x, y, xs)
        k = model.kernel(x, x) + 0.01 * np.eye(3)
        k_inv = np.linalg.inv(k)
        cross = model.kernel(x, xs)
        mean_naive = cross.T @ k_inv @ y
        var_naive = np.diag(model.kernel(xs, xs)) + 0.01 - np.sum(cross * (k_inv @ cross), axis=0)
        np.testing.assert_allclose(mean, mean_naive, atol=1e-10)
        np.testing.assert_allclose(var, var_naive, atol=1e-10)

    def test_linear_kernel_recovers_line_through_origin(self):
        model = GpModel(kernel=LinearKernel(var=10.0), noise_var=1e-8)
        x = np.array([[1.0], [2.0]])
        y = 0.7 * x[:, 0]
        mean, _ = gp_posterior(model, x, y, np.array([[4.0]]))
        assert abs(mean[0] - 2.8) < 1e-4

    def test_jitter_rescues_duplicate_points(self):
        model = GpModel(kernel=RbfKernel(), noise_var=0.0)
        x = np.array([[1.0], [1.0], [2.0]])  # duplicate rows: singular kernel
        y = np.array([0.3, 0.3, 1.0])
        mean, _ = gp_posterior(model, x, y, np.array([[1.5]]))
        assert np.isfinite(mean).all()

    def test_indefinite_matrix_raises_after_escalation(self):
        model = GpModel(kernel=RbfKernel(), noise_var=0.0, jitter=1e-12)
        with pytest.raises(IndefiniteKernelError):
            _chol_with_jitter(model, np.array([[1.0, 0.0], [0.0, -5.0]]))


class TestFiniteDifferences:
    def test_square(self):
        grad = finite_difference_gradient(lambda t: float(t**2), np.array(3.0))
        assert abs(grad - 6.0) < 1e-9

    def test_sine_at_zero_high_precision(self):
        grad = finite_difference_gradient(lambda t: float(np.sin(t)), np.array(0.0))
        assert abs(grad - 1.0) < 1e-10

    def test_constant_function(self):
        grad = finite_difference_gradient(lambda t: 1.5, np.ones((2, 3)))
        np.testing.assert_array_equal(grad, np.zeros((2, 3)))

    def test_shape_preserved_and_per_coordinate(self):
        theta = np.array([[1.0, 2.0], [3.0, 4.0]])
        grad = finite_difference_gradient(lambda t: float((t**2).sum()), theta)
        np.testing.assert_allclose(grad, 2 * theta, atol=1e-8)

    def test_nonfinite_evaluation_raises(self):
        with pytest.raises(ArithmeticError):
            finite_difference_gradient(lambda t: float("nan"), np.array(0.0))
