"""Prediction-error metrics over valid points only."""

from __future__ import annotations

import numpy as np


class EmptyEvaluationError(ValueError):
    """No valid points survived masking."""


def evaluate_metrics(
    y_pred: np.ndarray,
    y_true: np.ndarray,
    valid_mask: np.ndarray | None = None,
    mape_threshold: float = 1e-3,
) -> dict:
    """MAE / RMSE / MAPE over masked-in points.

    MAPE (reported in percent) additionally skips labels with magnitude
    below ``mape_threshold``; it is nan when no label clears the threshold.
    """
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"shape mismatch: {y_pred.shape} vs {y_true.shape}")
    if valid_mask is None:
        valid_mask = np.ones(y_true.shape, dtype=bool)
    else:
        valid_mask = np.asarray(valid_mask, dtype=bool)
        if valid_mask.shape != y_true.shape:
            raise ValueError(f"mask shape {valid_mask.shape} != {y_true.shape}")
    if not valid_mask.any():
        raise EmptyEvaluationError("no valid points to evaluate")
    err = (y_pred - y_true)[valid_mask]
    truth = y_true[valid_mask]
    mape_ok = np.abs(truth) >= mape_threshold
    mape = float(100.0 * np.mean(np.abs(err[mape_ok] / truth[mape_ok]))) if mape_ok.any() else float("nan")
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(np.sqrt(np.mean(err * err))),
        "mape": mape,
    }


def per_horizon_metrics(
    y_pred: np.ndarray,
    y_true: np.ndarray,
    valid_mask: np.ndarray | None = None,
    mape_threshold: float = 1e-3,
) -> dict:
    """Overall metrics plus one entry per trailing-axis horizon."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    mask = np.ones(y_true.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    horizons = [
        evaluate_metrics(y_pred[..., s], y_true[..., s], mask[..., s], mape_threshold)
        for s in range(y_true.shape[-1])
    ]
    return {
        "overall": evaluate_metrics(y_pred, y_true, mask, mape_threshold),
        "per_horizon": horizons,
    }


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose arg-max output matches the integer label."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))
