"""Covariance-matching objective.

Two R x R matrices are built over the rows of a batch: the empirical target
covariance (data side) and the scaled Gram matrix of the basis rows (model
side).  The regularizer is the mean squared entry-wise gap between the two,
and the combined training objective is

    mean((Y - Yhat)^2) + lam * mean((target_cov - basis_gram)^2)

At ``lam == 0`` the covariance branch is skipped entirely, so the objective
is the plain MSE graph, bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor


class MeanMode(Enum):
    """How target rows are centered before the outer product."""

    ZERO_MEAN = "zero_mean"                     # raw targets, zero assumed mean
    RESIDUAL_ZERO_MEAN = "residual_zero_mean"   # Y - Yhat, zero assumed mean
    BATCH_MEAN = "batch_mean"                   # subtract per-column batch mean


class SigmaMode(Enum):
    """Scale applied to the basis Gram matrix."""

    MEASURED_LAST_LAYER = "measured_last_layer"  # population variance of head weights
    FIXED_ONE = "fixed_one"


class RowGrouping(Enum):
    FLATTEN_SAMPLE_NODE = "flatten_sample_node"  # one row per (sample, node)
    PER_NODE_ACROSS_BATCH = "per_node_across_batch"  # one row per node, batch pooled


class DegenerateBatchError(ValueError):
    """Covariance over fewer than two rows was requested."""


@dataclass
class CovLossConfig:
    lam: float = 1.0
    mean_mode: MeanMode = MeanMode.RESIDUAL_ZERO_MEAN
    sigma_mode: SigmaMode = SigmaMode.MEASURED_LAST_LAYER
    detach_target: bool = True
    detach_sigma: bool = True
    row_grouping: RowGrouping = RowGrouping.FLATTEN_SAMPLE_NODE

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"importance factor must be non-negative, got {self.lam}")


@dataclass
class BatchViews:
    """Aligned basis/target row pair sharing one (sample, node) row index.

    ``target_rows`` already reflects the mean mode: residuals for
    RESIDUAL_ZERO_MEAN, raw targets otherwise (BATCH_MEAN centering happens
    inside :func:`empirical_covariance`).
    """

    basis: Tensor
    target_rows: Tensor
    row_index: list[tuple[int, int]]

    def __post_init__(self):
        if self.basis.shape[0] != self.target_rows.shape[0]:
            raise T.ShapeError(
                f"basis has {self.basis.shape[0]} rows, targets {self.target_rows.shape[0]}"
            )
        if len(self.row_index) != self.basis.shape[0]:
            raise T.ShapeError(
                f"row_index length {len(self.row_index)} != {self.basis.shape[0]} rows"
            )


def make_batch_views(
    basis: Tensor,
    prediction: Tensor,
    target: Tensor,
    row_index: list[tuple[int, int]],
    cfg: CovLossConfig,
) -> BatchViews:
    """Build the aligned views for one batch.

    For PER_NODE_ACROSS_BATCH the (sample, node) rows of the same node are
    concatenated column-wise, giving one row per node whose columns run over
    (sample, feature).
    """
    if cfg.mean_mode is MeanMode.RESIDUAL_ZERO_MEAN:
        rows = T.sub(target, prediction)
    else:
        rows = target
    if cfg.row_grouping is RowGrouping.PER_NODE_ACROSS_BATCH:
        nodes = sorted({node for _, node in row_index})
        order = []
        for node in nodes:
            order.extend(i for i, (_, n) in enumerate(row_index) if n == node)
        per_node = len(order) // len(nodes)
        basis = T.reshape(T.gather_rows(basis, order), (len(nodes), per_node * basis.shape[1]))
        rows = T.reshape(T.gather_rows(rows, order), (len(nodes), per_node * rows.shape[1]))
        row_index = [(0, node) for node in nodes]
    return BatchViews(basis=basis, target_rows=rows, row_index=row_index)


def empirical_covariance(views: BatchViews, cfg: CovLossConfig) -> Tensor:
    """Data-side covariance: M M^T / S over the (possibly centered) rows."""
    rows = views.target_rows
    n_rows, n_cols = rows.shape
    if n_rows < 2:
        raise DegenerateBatchError(f"covariance needs at least 2 rows, got {n_rows}")
    if n_cols < 1:
        raise T.ShapeError("target rows need at least one column")
    if cfg.mean_mode is MeanMode.BATCH_MEAN:
        col_mean = T.reduce_mean(rows, axes=0)
        rows = T.sub(rows, T.repeat_rows(col_mean, n_rows))
    if cfg.detach_target:
        rows = T.detach(rows)
    outer = T.matmul(rows, T.permute(rows, (1, 0)))
    return T.mul(outer, 1.0 / n_cols)


def weight_variance(weights: Tensor, detached: bool = True):
    """Population variance of all head-weight entries, pooled over columns.

    Returns a float when detached, otherwise a scalar tensor so the scale
    stays differentiable.
    """
    if detached:
        w = weights.data
        return float(np.mean((w - w.mean()) ** 2))
    centered = T.sub(weights, T.reduce_mean(weights))
    return T.reduce_mean(T.square(centered))


def basis_gram(views: BatchViews, weights: Tensor, cfg: CovLossConfig) -> Tensor:
    """Model-side covariance estimate: sigma^2 * basis basis^T."""
    basis = views.basis
    if basis.shape[0] < 1 or basis.shape[1] < 1:
        raise T.ShapeError(f"basis must be non-empty, got shape {basis.shape}")
    gram = T.matmul(basis, T.permute(basis, (1, 0)))
    if cfg.sigma_mode is SigmaMode.FIXED_ONE:
        return gram
    scale = weight_variance(weights, detached=cfg.detach_sigma)
    return T.mul(gram, scale)


def covariance_loss(target_cov: Tensor, gram: Tensor) -> Tensor:
    """Mean squared entry-wise gap between the two R x R matrices."""
    if target_cov.shape != gram.shape:
        raise T.ShapeError(f"covariance shapes disagree: {target_cov.shape} vs {gram.shape}")
    return T.reduce_mean(T.square(T.sub(target_cov, gram)))


def mse(prediction: Tensor, target: Tensor) -> Tensor:
    if prediction.shape != target.shape:
        raise T.ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
    return T.reduce_mean(T.square(T.sub(target, prediction)))


def combined_objective(
    prediction: Tensor,
    target: Tensor,
    views: BatchViews,
    weights: Tensor,
    cfg: CovLossConfig,
) -> Tensor:
    """MSE plus lam times the covariance gap; exactly MSE when lam == 0."""
    error = mse(prediction, target)
    if cfg.lam == 0.0:
        return error
    gap = covariance_loss(empirical_covariance(views, cfg), basis_gram(views, weights, cfg))
    return T.add(error, T.mul(gap, cfg.lam))
