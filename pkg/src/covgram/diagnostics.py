"""Basis-function diagnostics: cross-term contributions, the off-diagonal
constraint residual, covariance alignment traces, and per-component basis
decompositions.

The cross-term of a row pair is the full bilinear form through the readout
weights minus its diagonal part:

    sum_ij w_i w_j b_i(x) b_j(x') - sum_i w_i^2 b_i(x) b_i(x')

which is identically the quadratic form of b(x) against the zero-diagonal
matrix w w^T.  Training that matches the basis Gram to target covariance
drives these terms toward zero.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import covloss as C
from . import tensor as T

_HIST_BINS = 24


@dataclass
class CrossTermReport:
    """Cross-term population over sampled row pairs, pooled across outputs."""

    values: np.ndarray
    full_values: np.ndarray
    zero_fraction: float
    epsilon: float
    histogram: dict
    n_rows: int
    n_pairs: int
    seed: int
    exhaustive: bool

    def to_json_dict(self) -> dict:
        return {
            "zero_fraction": self.zero_fraction,
            "epsilon": self.epsilon,
            "n_rows": self.n_rows,
            "n_pairs": self.n_pairs,
            "seed": self.seed,
            "exhaustive": self.exhaustive,
            "histogram": self.histogram,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2, sort_keys=True)


def _as_weight_columns(weights) -> np.ndarray:
    w = weights.data if isinstance(weights, T.Tensor) else np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if w.ndim != 2:
        raise T.ShapeError(f"weights must be [F'] or [F', S], got {w.shape}")
    return w


def cross_term_contribution(basis_row, other_row, weights) -> float:
    """Off-diagonal bilinear mass of one row pair, summed over output columns."""
    a = np.asarray(basis_row, dtype=np.float64).reshape(-1)
    b = np.asarray(other_row, dtype=np.float64).reshape(-1)
    w = _as_weight_columns(weights)
    if a.shape != b.shape or w.shape[0] != a.shape[0]:
        raise T.ShapeError(
            f"dimension mismatch: rows {a.shape}/{b.shape}, weights {w.shape}"
        )
    total = 0.0
    for s in range(w.shape[1]):
        col = w[:, s]
        full = float((col @ a) * (col @ b))
        diag = float((col * col * a * b).sum())
        total += full - diag
    return total


def constraint_residual(basis_row, other_row, weights) -> float:
    """Quadratic form through w w^T with its diagonal zeroed.

    Algebraically identical to :func:`cross_term_contribution`.
    """
    a = np.asarray(basis_row, dtype=np.float64).reshape(-1)
    b = np.asarray(other_row, dtype=np.float64).reshape(-1)
    w = _as_weight_columns(weights)
    if a.shape != b.shape or w.shape[0] != a.shape[0]:
        raise T.ShapeError(
            f"dimension mismatch: rows {a.shape}/{b.shape}, weights {w.shape}"
        )
    total = 0.0
    for s in range(w.shape[1]):
        col = w[:, s]
        mat = np.outer(col, col)
        np.fill_diagonal(mat, 0.0)
        total += float(a @ mat @ b)
    return total


def _sample_pairs(n_rows: int, max_pairs: int, seed: int):
    total = n_rows * (n_rows - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n_rows, k=1)
        return i, j, True
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n_rows, size=max_pairs)
    j = rng.integers(0, n_rows - 1, size=max_pairs)
    j = np.where(j >= i, j + 1, j)  # distinct pair, uniform over ordered pairs
    return i, j, False


def cross_term_report(
    basis: np.ndarray,
    weights,
    epsilon: float | None = None,
    max_pairs: int = 1_000_000,
    seed: int = 0,
) -> CrossTermReport:
    """Cross-term distribution over distinct row pairs of an evaluation set.

    Pairs are exhaustive up to ``max_pairs`` and uniformly sampled (seeded)
    beyond.  Unless given, the zero threshold is 1e-6 times the median
    magnitude of the full bilinear form over the same pairs, floored at the
    smallest normal float so exact zeros always count even when the full form
    is itself degenerate; the threshold used is recorded in the report.
    """
    basis = basis.data if isinstance(basis, T.Tensor) else np.asarray(basis, dtype=np.float64)
    if basis.ndim != 2 or basis.shape[0] < 2:
        raise T.ShapeError(f"need at least 2 basis rows, got shape {basis.shape}")
    w = _as_weight_columns(weights)
    i_idx, j_idx, exhaustive = _sample_pairs(basis.shape[0], max_pairs, seed)
    projections = basis @ w  # [R, S] readout per column
    cross_cols, full_cols = [], []
    for s in range(w.shape[1]):
        full = projections[i_idx, s] * projections[j_idx, s]
        diag = (basis[i_idx] * basis[j_idx]) @ (w[:, s] * w[:, s])
        cross_cols.append(full - diag)
        full_cols.append(full)
    cross = np.concatenate(cross_cols)
    full = np.concatenate(full_cols)
    if epsilon is None:
        epsilon = max(1e-6 * float(np.median(np.abs(full))), float(np.finfo(np.float64).tiny))
    zero_fraction = float(np.mean(np.abs(cross) < epsilon))
    return CrossTermReport(
        values=cross,
        full_values=full,
        zero_fraction=zero_fraction,
        epsilon=epsilon,
        histogram=_log_histogram(np.abs(cross), epsilon),
        n_rows=basis.shape[0],
        n_pairs=int(i_idx.size),
        seed=seed,
        exhaustive=exhaustive,
    )


def _log_histogram(magnitudes: np.ndarray, epsilon: float) -> dict:
    """Log10 bins of |value| with an explicit below-threshold zero bucket."""
    zero_bucket = int(np.sum(magnitudes < epsilon))
    live = magnitudes[magnitudes >= max(epsilon, 1e-300)]
    if live.size == 0:
        return {"zero_bucket": zero_bucket, "bin_edges": [], "bin_counts": []}
    lo = np.floor(np.log10(live.min()))
    hi = np.ceil(np.log10(live.max()))
    if hi <= lo:
        hi = lo + 1.0
    edges = np.logspace(lo, hi, _HIST_BINS + 1)
    counts, _ = np.histogram(live, bins=edges)
    return {
        "zero_bucket": zero_bucket,
        "bin_edges": edges.tolist(),
        "bin_counts": counts.tolist(),
    }


# ---------------------------------------------------------------------------
# traces


@dataclass
class AlignmentTrace:
    """Per-step covariance alignment between basis Gram and target covariance."""

    time_index: list[int] = field(default_factory=list)
    gram_diag: dict[int, list[float]] = field(default_factory=dict)
    target_var: dict[int, list[float]] = field(default_factory=dict)
    gram_offdiag: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    target_cov: dict[tuple[int, int], list[float]] = field(default_factory=dict)
    frobenius_gap: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        headers = ["time", "frobenius_gap"]
        columns = [self.time_index, self.frobenius_gap]
        for node, series in sorted(self.gram_diag.items()):
            headers += [f"gram_diag_{node}", f"target_var_{node}"]
            columns += [series, self.target_var[node]]
        for (i, j), series in sorted(self.gram_offdiag.items()):
            headers += [f"gram_offdiag_{i}_{j}", f"target_cov_{i}_{j}"]
            columns += [series, self.target_cov[(i, j)]]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers)
            writer.writerows(zip(*columns))


def alignment_trace(
    model, stream, node_pairs, cfg: C.CovLossConfig, target_offset: float = 0.0
) -> AlignmentTrace:
    """Walk an ordered stream of windows and record, per step, the Gram and
    target-covariance entries for the requested node pairs plus the Frobenius
    gap of the full matrices.

    ``target_offset`` is added to the target rows before the covariance is
    formed, mirroring whatever level convention training used.
    """
    trace = AlignmentTrace()
    nodes = sorted({n for pair in node_pairs for n in pair})
    for node in nodes:
        trace.gram_diag[node] = []
        trace.target_var[node] = []
    for pair in node_pairs:
        trace.gram_offdiag[tuple(pair)] = []
        trace.target_cov[tuple(pair)] = []
    for step, batch in enumerate(stream):
        gram, target_cov, row_nodes = _batch_matrices(model, batch, cfg, target_offset)
        position = {n: k for k, n in enumerate(row_nodes)}
        for node in nodes:
            if node not in position:
                raise T.ShapeError(f"node {node} not present in batch rows")
        trace.time_index.append(step)
        for node in nodes:
            k = position[node]
            trace.gram_diag[node].append(float(gram[k, k]))
            trace.target_var[node].append(float(target_cov[k, k]))
        for pair in node_pairs:
            a, b = position[pair[0]], position[pair[1]]
            trace.gram_offdiag[tuple(pair)].append(float(gram[a, b]))
            trace.target_cov[tuple(pair)].append(float(target_cov[a, b]))
        trace.frobenius_gap.append(float(np.linalg.norm(target_cov - gram)))
    return trace


def _batch_matrices(model, batch, cfg: C.CovLossConfig, target_offset: float = 0.0):
    """Gram / target-covariance matrices for one window batch, off-tape."""
    T.new_tape()
    out = model.forward(T.Tensor(batch.x))
    y_rows = T.Tensor(batch.y.reshape(-1, batch.y.shape[-1]) + target_offset)
    views = C.make_batch_views(out.basis, out.prediction_rows, y_rows, out.row_index, cfg)
    gram = C.basis_gram(views, out.last_weights, cfg).data
    target_cov = C.empirical_covariance(views, cfg).data
    row_nodes = [node for _, node in views.row_index]
    return gram, target_cov, row_nodes


@dataclass
class BasisDecompositionTrace:
    """Weighted basis components of one node's prediction over a stream."""

    node: int
    output_column: int
    components: np.ndarray      # [steps, F']
    prediction: np.ndarray      # [steps]
    label: np.ndarray           # [steps]
    correlations: np.ndarray    # [F'] |pearson| vs prediction; inactive -> nan

    def active_correlations(self) -> np.ndarray:
        return self.correlations[~np.isnan(self.correlations)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            n_comp = self.components.shape[1]
            writer.writerow(["time", "label", "prediction"] + [f"component_{i}" for i in range(n_comp)])
            for t in range(self.components.shape[0]):
                writer.writerow(
                    [t, self.label[t], self.prediction[t]] + list(self.components[t])
                )


def _abs_pearson(a: np.ndarray, b: np.ndarray) -> float:
    sa, sb = a.std(), b.std()
    if sa == 0.0 or sb == 0.0:
        return 0.0
    return float(abs(np.corrcoef(a, b)[0, 1]))


def basis_decomposition_trace(
    model, stream, node: int, output_column: int = 0
) -> BasisDecompositionTrace:
    """Per-step weighted basis components w_i * b_i for one node, with the
    magnitude of each active component's correlation to the prediction.

    Components whose series never rises above 1e-9 of the prediction scale
    are marked inactive (nan correlation); they contribute nothing to the
    readout, so their correlation is meaningless.
    """
    comp_rows, preds, labels = [], [], []
    for batch in stream:
        T.new_tape()
        out = model.forward(T.Tensor(batch.x))
        try:
            k = out.row_index.index((0, node))
        except ValueError:
            raise T.ShapeError(f"node {node} not present in batch rows") from None
        w_col = out.last_weights.data[:, output_column]
        comp_rows.append(out.basis.data[k] * w_col)
        preds.append(float(out.prediction_rows.data[k, output_column]))
        labels.append(float(batch.y.reshape(-1, batch.y.shape[-1])[k, output_column]))
    components = np.asarray(comp_rows)
    prediction = np.asarray(preds)
    label = np.asarray(labels)
    scale = max(np.abs(prediction).max(), 1e-300)
    correlations = np.full(components.shape[1], np.nan)
    for i in range(components.shape[1]):
        series = components[:, i]
        if np.abs(series).max() >= 1e-9 * scale:
            correlations[i] = _abs_pearson(series, prediction)
    return BasisDecompositionTrace(
        node=node,
        output_column=output_column,
        components=components,
        prediction=prediction,
        label=label,
        correlations=correlations,
    )
