"""Exact Gaussian-process regression and a finite-difference gradient oracle.

These are the artifact's independent ground-truth tools: the GP gives the
reference log-likelihood / posterior that the neural models are compared
against, and the central-difference routine is the oracle every analytic
gradient is checked with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RbfKernel",
    "LinearKernel",
    "GpModel",
    "IndefiniteKernelError",
    "log_marginal_likelihood",
    "gp_posterior",
    "finite_difference_gradient",
]


class IndefiniteKernelError(ArithmeticError):
    """Cholesky kept failing after jitter escalation."""


@dataclass(frozen=True)
class RbfKernel:
    lengthscale: float = 1.0
    signal_var: float = 1.0

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
        return self.signal_var * np.exp(-0.5 * sq / self.lengthscale**2)


@dataclass(frozen=True)
class LinearKernel:
    var: float = 1.0

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        return self.var * (a @ b.T)


@dataclass(frozen=True)
class GpModel:
    """Kernel + observation noise; jitter is the Cholesky fallback unit."""

    kernel: RbfKernel | LinearKernel
    noise_var: float = 1e-2
    jitter: float = 1e-10

    def __post_init__(self):
        if self.noise_var < 0:
            raise ValueError(f"noise_var must be non-negative, got {self.noise_var}")
        if self.jitter <= 0:
            raise ValueError(f"jitter must be positive, got {self.jitter}")


def _chol_with_jitter(model: GpModel, gram: np.ndarray) -> np.ndarray:
    """Cholesky of gram + noise, escalating jitter by 10x up to 3 retries."""
    n = gram.shape[0]
    noisy = gram + model.noise_var * np.eye(n)
    base = model.jitter * max(np.trace(gram) / n, 1.0)
    bump = 0.0
    for attempt in range(4):
        try:
            return np.linalg.cholesky(noisy + bump * np.eye(n))
        except np.linalg.LinAlgError:
            bump = base * (10.0**attempt)
    raise IndefiniteKernelError(
        f"kernel matrix stayed indefinite after jitter escalation up to {bump:g}"
    )


def log_marginal_likelihood(model: GpModel, x: np.ndarray, y: np.ndarray) -> float:
    """Exact Gaussian log-probability of targets y at inputs x.

    Evaluates -0.5 y^T K^-1 y - 0.5 log|K| - (n/2) log(2 pi) through a
    Cholesky factorization, where K includes the observation noise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.shape[0]
    if n < 1:
        raise ValueError("need at least one observation")
    if x.shape[0] != n:
        raise ValueError(f"{x.shape[0]} inputs vs {n} targets")
    chol = _chol_with_jitter(model, model.kernel(x, x))
    alpha = np.linalg.solve(chol, y)
    quad = float(alpha @ alpha)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * quad - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi)


def gp_posterior(
    model: GpModel,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_test: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional mean and variance per test point.

    With no training data this degenerates to the prior: zero mean and the
    kernel diagonal (plus noise) as variance.
    """
    x_test = np.atleast_2d(np.asarray(x_test, dtype=np.float64))
    y_train = np.asarray(y_train, dtype=np.float64).reshape(-1)
    prior_var = np.diag(model.kernel(x_test, x_test)) + model.noise_var
    if y_train.size == 0:
        return np.zeros(x_test.shape[0]), prior_var
    x_train = np.atleast_2d(np.asarray(x_train, dtype=np.float64))
    chol = _chol_with_jitter(model, model.kernel(x_train, x_train))
    cross = model.kernel(x_train, x_test)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y_train))
    v = np.linalg.solve(chol, cross)
    mean = cross.T @ alpha
    var = prior_var - np.sum(v * v, axis=0)
    return mean, np.maximum(var, 0.0)


def finite_difference_gradient(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences (f(t+h e_i) - f(t-h e_i)) / 2h per coordinate."""
    theta = np.asarray(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = f(bumped.reshape(theta.shape))
        bumped[i] = flat[i] - h
        lo = f(bumped.reshape(theta.shape))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ArithmeticError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * h)
    return grad.reshape(theta.shape)
