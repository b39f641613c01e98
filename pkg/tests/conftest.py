"""Shared test helpers."""

from __future__ import annotations

import numpy as np
import pytest

from covgram.gp import finite_difference_gradient


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, atol: float = 1e-8):
    """Per-coordinate relative check between analytic and finite-difference grads."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def fd_gradient(f, theta, h: float = 1e-5):
    return finite_difference_gradient(f, np.asarray(theta, dtype=np.float64), h)
