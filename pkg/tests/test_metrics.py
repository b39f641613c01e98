"""Metric conventions: hand-evaluated values and masking semantics."""

import numpy as np
import pytest

from covgram.harness.metrics import (
    EmptyEvaluationError,
    accuracy,
    evaluate_metrics,
    per_horizon_metrics,
)


class TestEvaluateMetrics:
    def test_perfect_prediction_is_all_zero(self, rng):
        y = rng.normal(size=(4, 3))
        out = evaluate_metrics(y, y)
        assert out["mae"] == 0.0 and out["rmse"] == 0.0 and out["mape"] == 0.0

    def test_hand_evaluated_values(self):
        out = evaluate_metrics(np.array([0.0, 0.0]), np.array([3.0, 4.0]))
        assert out["mae"] == pytest.approx(3.5, abs=1e-15)
        assert out["rmse"] == pytest.approx(3.5355339059327378, abs=1e-12)
        assert out["mape"] == pytest.approx(100.0, abs=1e-12)  # |3/3|, |4/4| in percent

    def test_mask_restricts_to_survivors(self):
        out = evaluate_metrics(
            np.array([0.0, 0.0]), np.array([3.0, 4.0]), np.array([False, True])
        )
        assert out["mae"] == 4.0
        assert out["rmse"] == 4.0

    def test_zero_valid_points_raises(self):
        with pytest.raises(EmptyEvaluationError):
            evaluate_metrics(np.zeros(3), np.ones(3), np.zeros(3, dtype=bool))

    def test_mape_threshold_excludes_tiny_labels(self):
        pred = np.array([1.0, 0.0])
        true = np.array([1e-9, 2.0])
        out = evaluate_metrics(pred, true, mape_threshold=1e-3)
        assert out["mape"] == pytest.approx(100.0)  # only the |y|=2 point
        assert np.isnan(evaluate_metrics(pred, np.array([1e-9, 1e-9]))["mape"])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_metrics(np.zeros(2), np.zeros(3))
        with pytest.raises(ValueError):
            evaluate_metrics(np.zeros(2), np.zeros(2), np.zeros(3, dtype=bool))


class TestPerHorizon:
    def test_per_horizon_and_overall(self, rng):
        pred = rng.normal(size=(5, 4, 3))
        true = rng.normal(size=(5, 4, 3))
        out = per_horizon_metrics(pred, true)
        assert len(out["per_horizon"]) == 3
        expected = evaluate_metrics(pred[..., 1], true[..., 1])
        assert out["per_horizon"][1] == expected
        assert out["overall"] == evaluate_metrics(pred, true)


class TestAccuracy:
    def test_argmax_match(self):
        logits = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        assert accuracy(logits, np.array([0, 1, 1])) == pytest.approx(2.0 / 3.0)
