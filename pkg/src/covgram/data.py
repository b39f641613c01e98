"""Synthetic data generators, CSV ingestion, windowing and noise injection.

All generators are pure functions of (parameters, seed); a fixed seed
reproduces the dataset bitwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import GraphSpec


class DataError(ValueError):
    """Invalid generator parameters or degenerate data."""


class ParseError(DataError):
    """Malformed CSV input; message carries the 1-based line number."""


class InsufficientLengthError(DataError):
    """Split segment too short for the requested window."""


# ---------------------------------------------------------------------------
# graphs


def ring_graph(n_nodes: int) -> GraphSpec:
    if n_nodes < 2:
        raise DataError(f"ring needs at least 2 nodes, got {n_nodes}")
    a = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes):
        a[i, (i + 1) % n_nodes] = 1.0
        a[(i + 1) % n_nodes, i] = 1.0
    return GraphSpec(adjacency=a)


def grid_graph(n_nodes: int) -> GraphSpec:
    """4-neighbor grid on the factor pair of n_nodes closest to square."""
    if n_nodes < 2:
        raise DataError(f"grid needs at least 2 nodes, got {n_nodes}")
    rows = int(np.sqrt(n_nodes))
    while n_nodes % rows:
        rows -= 1
    cols = n_nodes // rows
    a = np.zeros((n_nodes, n_nodes))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                a[i, i + 1] = a[i + 1, i] = 1.0
            if r + 1 < rows:
                a[i, i + cols] = a[i + cols, i] = 1.0
    return GraphSpec(adjacency=a)


def random_geometric_graph(n_nodes: int, seed: int = 0, radius: float = 0.45) -> GraphSpec:
    if n_nodes < 2:
        raise DataError(f"graph needs at least 2 nodes, got {n_nodes}")
    rng = np.random.default_rng(seed)
    points = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    dist = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(-1))
    a = ((dist <= radius) & (dist > 0)).astype(np.float64)
    return GraphSpec(adjacency=a)


_GRAPH_BUILDERS = {
    "ring": lambda n, seed: ring_graph(n),
    "grid": lambda n, seed: grid_graph(n),
    "random_geometric": lambda n, seed: random_geometric_graph(n, seed),
}


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SeriesDataset:
    """[T, N, F] series on a graph; scaler is filled by window_and_split."""

    values: np.ndarray
    graph: GraphSpec
    valid_mask: np.ndarray
    scaler: tuple[np.ndarray, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"series must be [T, N, F], got {self.values.shape}")
        if self.values.shape[1] != self.graph.n_nodes:
            raise DataError(
                f"series has {self.values.shape[1]} nodes, graph {self.graph.n_nodes}"
            )
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.valid_mask.shape != self.values.shape[:2]:
            raise DataError(
                f"valid_mask {self.valid_mask.shape} != series frame {self.values.shape[:2]}"
            )


def generate_traffic_like(
    n_nodes: int,
    t_total: int,
    graph_kind: str = "ring",
    seed: int = 0,
    noise_sigma: float = 0.5,
    diffusion: float = 0.1,
    n_phase_groups: int = 4,
    daily_period: int = 288,
) -> SeriesDataset:
    """Traffic-shaped synthetic series: per-node daily sinusoid with two
    rush-hour dips at group-dependent phases, one propagation step of graph
    diffusion per tick, and additive Gaussian observation noise.

    Nodes sharing a phase group have identical latent signals, so their
    clean-series correlation is ~1; the full clean correlation matrix is
    recorded in ``metadata['true_correlation']``.
    """
    if n_nodes < 2:
        raise DataError(f"need at least 2 nodes, got {n_nodes}")
    if t_total < daily_period:
        raise DataError(f"t_total {t_total} shorter than one period {daily_period}")
    if graph_kind not in _GRAPH_BUILDERS:
        raise DataError(f"unknown graph kind '{graph_kind}'")
    rng = np.random.default_rng(seed)
    graph = _GRAPH_BUILDERS[graph_kind](n_nodes, seed)

    groups = np.arange(n_nodes) % n_phase_groups
    group_phase = rng.uniform(0.0, 2.0 * np.pi, size=n_phase_groups)
    tau = np.arange(daily_period)
    period_signal = np.zeros((daily_period, n_phase_groups))
    for g in range(n_phase_groups):
        dip_center = (group_phase[g] / (2.0 * np.pi)) * daily_period / 2.0 + daily_period / 4.0
        morning = np.exp(-0.5 * ((tau - dip_center) / 12.0) ** 2)
        evening = np.exp(-0.5 * ((tau - dip_center - daily_period / 2.0) / 12.0) ** 2)
        period_signal[:, g] = (
            60.0
            + 8.0 * np.sin(2.0 * np.pi * tau / daily_period + group_phase[g])
            - 18.0 * morning
            - 15.0 * evening
        )
    base = period_signal[np.arange(t_total) % daily_period][:, groups]

    clean = np.empty((t_total, n_nodes))
    clean[0] = base[0]
    if diffusion > 0.0:
        prop = graph.propagation
        for t in range(1, t_total):
            clean[t] = (1.0 - diffusion) * base[t] + diffusion * (prop @ clean[t - 1])
    else:
        clean[1:] = base[1:]

    observed = clean + rng.normal(0.0, noise_sigma, size=clean.shape) if noise_sigma > 0 else clean
    correlated_pairs = [
        (i, j) for i in range(n_nodes) for j in range(i + 1, n_nodes) if groups[i] == groups[j]
    ]
    return SeriesDataset(
        values=observed[:, :, None],
        graph=graph,
        valid_mask=np.ones((t_total, n_nodes), dtype=bool),
        metadata={
            "phase_group": groups.tolist(),
            "correlated_pairs": correlated_pairs,
            "true_correlation": np.corrcoef(clean.T),
            "daily_period": daily_period,
            "seed": seed,
        },
    )


@dataclass
class ToyClassification:
    """Gaussian blobs with deliberately ambiguous between-class samples."""

    x: np.ndarray                # [n, dim]
    labels_onehot: np.ndarray    # [n, n_classes]
    labels: np.ndarray           # [n] ints
    ambiguous_idx: np.ndarray    # indices into rows
    class_means: np.ndarray      # [n_classes, dim]


def generate_toy_classification(
    n_classes: int,
    n_per_class: int,
    spread: float,
    seed: int = 0,
    dim: int = 16,
    ambiguous_frac: float = 0.15,
) -> ToyClassification:
    if n_classes < 2:
        raise DataError(f"need at least 2 classes, got {n_classes}")
    if n_per_class < 1:
        raise DataError(f"need at least 1 sample per class, got {n_per_class}")
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim))
    means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)
    n_amb = int(np.ceil(ambiguous_frac * n_per_class))
    xs, ys, amb_flags = [], [], []
    for c in range(n_classes):
        plain = n_per_class - n_amb
        xs.append(means[c] + spread * rng.normal(size=(plain, dim)))
        ys.extend([c] * plain)
        amb_flags.extend([False] * plain)
        # Ambiguous points sit between this class and the next, biased
        # toward their own class so spread -> 0 stays separable.
        other = (c + 1) % n_classes
        midpoint = 0.6 * means[c] + 0.4 * means[other]
        xs.append(midpoint + 0.5 * spread * rng.normal(size=(n_amb, dim)))
        ys.extend([c] * n_amb)
        amb_flags.extend([True] * n_amb)
    x = np.concatenate(xs, axis=0)
    labels = np.asarray(ys, dtype=np.intp)
    amb = np.asarray(amb_flags, dtype=bool)
    order = rng.permutation(x.shape[0])
    x, labels, amb = x[order], labels[order], amb[order]
    onehot = np.zeros((x.shape[0], n_classes))
    onehot[np.arange(x.shape[0]), labels] = 1.0
    return ToyClassification(
        x=x,
        labels_onehot=onehot,
        labels=labels,
        ambiguous_idx=np.flatnonzero(amb),
        class_means=means,
    )


def inject_node_noise(
    dataset: SeriesDataset,
    node_ids,
    mode: str = "replace_white",
    sigma: float | None = None,
    seed: int = 0,
) -> SeriesDataset:
    """Replace (or corrupt) the selected nodes' series with white noise.

    ``sigma`` defaults to each node's own standard deviation.  Non-selected
    nodes and the validity mask are untouched; the input dataset is not
    modified.
    """
    node_ids = sorted(int(n) for n in node_ids)
    n_nodes = dataset.graph.n_nodes
    for n in node_ids:
        if not 0 <= n < n_nodes:
            raise DataError(f"node {n} out of range for {n_nodes} nodes")
    if mode not in ("replace_white", "add_white"):
        raise DataError(f"unknown noise mode '{mode}'")
    values = dataset.values.copy()
    rng = np.random.default_rng(seed)
    for n in node_ids:
        series = values[:, n, :]
        node_sigma = float(series.std()) if sigma is None else float(sigma)
        noise = rng.normal(0.0, node_sigma, size=series.shape)
        if mode == "replace_white":
            values[:, n, :] = series.mean(axis=0, keepdims=True) + noise
        else:
            values[:, n, :] = series + noise
    return SeriesDataset(
        values=values,
        graph=dataset.graph,
        valid_mask=dataset.valid_mask.copy(),
        metadata={**dataset.metadata, "noisy_nodes": node_ids},
    )


# ---------------------------------------------------------------------------
# windowing


@dataclass
class WindowedBatch:
    x: np.ndarray        # [b, T_in, N, F]
    y: np.ndarray        # [b, N, S]
    y_mask: np.ndarray   # [b, N, S]
    indices: np.ndarray  # source time offsets, [b]


@dataclass
class WindowedSplits:
    """Chronological train/val/test windows with a train-fit z-score scaler."""

    x: dict[str, np.ndarray]
    y: dict[str, np.ndarray]
    y_mask: dict[str, np.ndarray]
    offsets: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray
    batch_size: int
    seed: int

    def n_windows(self, split: str) -> int:
        return self.x[split].shape[0]

    def train_batches(self, epoch: int):
        """Seeded shuffle of training windows, deterministic per (seed, epoch)."""
        n = self.n_windows("train")
        order = np.random.default_rng([self.seed, epoch]).permutation(n)
        yield from self._emit("train", order, self.batch_size)

    def eval_batches(self, split: str, batch_size: int | None = None):
        """Chronological, unshuffled batches."""
        n = self.n_windows(split)
        yield from self._emit(split, np.arange(n), batch_size or self.batch_size)

    def _emit(self, split, order, batch_size):
        for start in range(0, len(order), batch_size):
            pick = order[start : start + batch_size]
            yield WindowedBatch(
                x=self.x[split][pick],
                y=self.y[split][pick],
                y_mask=self.y_mask[split][pick],
                indices=self.offsets[split][pick],
            )

    def inverse_transform_targets(self, y_scaled: np.ndarray) -> np.ndarray:
        return y_scaled * self.std[0] + self.mean[0]

    def transform_targets(self, y_raw: np.ndarray) -> np.ndarray:
        return (y_raw - self.mean[0]) / self.std[0]


def window_and_split(
    dataset: SeriesDataset,
    t_in: int,
    t_out: int,
    ratios=(0.7, 0.1, 0.2),
    batch_size: int = 8,
    seed: int = 0,
) -> WindowedSplits:
    """Chronological split, train-only scaler fit, window extraction.

    Windows never cross a split boundary.  Targets are feature 0 over the
    ``t_out`` steps after each input window, laid out as [N, t_out].
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise DataError(f"ratios must be 3 non-negative values summing to 1, got {ratios}")
    t_total, n_nodes, n_feat = dataset.values.shape
    n_train = int(t_total * ratios[0])
    n_val = int(t_total * ratios[1])
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, t_total)}
    window = t_in + t_out
    for split, (lo, hi) in bounds.items():
        if ratios[{"train": 0, "val": 1, "test": 2}[split]] > 0 and hi - lo < window:
            raise InsufficientLengthError(
                f"{split} segment of {hi - lo} ticks cannot hold a {window}-tick window"
            )
    train_vals = dataset.values[:n_train]
    train_mask = dataset.valid_mask[:n_train]
    mean = np.array([train_vals[:, :, f][train_mask].mean() for f in range(n_feat)])
    std = np.array([train_vals[:, :, f][train_mask].std() for f in range(n_feat)])
    if np.any(std <= 0):
        raise DataError("train split has a constant feature; cannot z-score")
    scaled = (dataset.values - mean) / std
    dataset.scaler = (mean, std)

    x, y, y_mask, offsets = {}, {}, {}, {}
    for split, (lo, hi) in bounds.items():
        starts = np.arange(lo, hi - window + 1) if hi - lo >= window else np.zeros(0, dtype=int)
        xs = np.stack([scaled[t : t + t_in] for t in starts]) if len(starts) else np.zeros((0, t_in, n_nodes, n_feat))
        ys = (
            np.stack([scaled[t + t_in : t + window, :, 0].T for t in starts])
            if len(starts)
            else np.zeros((0, n_nodes, t_out))
        )
        ms = (
            np.stack([dataset.valid_mask[t + t_in : t + window].T for t in starts])
            if len(starts)
            else np.zeros((0, n_nodes, t_out), dtype=bool)
        )
        x[split], y[split], y_mask[split], offsets[split] = xs, ys, ms, np.asarray(starts)
    return WindowedSplits(
        x=x, y=y, y_mask=y_mask, offsets=offsets,
        mean=mean, std=std, batch_size=batch_size, seed=seed,
    )


# ---------------------------------------------------------------------------
# CSV ingestion


def load_csv_series(path, adjacency_path) -> SeriesDataset:
    """Rows are time steps, columns are nodes; empty or NaN cells are masked."""
    rows: list[list[float]] = []
    mask_rows: list[list[bool]] = []
    width = None
    with open(path, newline="") as fh:
        for line_no, cells in enumerate(csv.reader(fh), start=1):
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise ParseError(f"{path}: line {line_no} has {len(cells)} cells, expected {width}")
            parsed, valid = [], []
            for col, cell in enumerate(cells):
                text = cell.strip()
                if text == "" or text.lower() == "nan":
                    parsed.append(0.0)
                    valid.append(False)
                    continue
                try:
                    parsed.append(float(text))
                    valid.append(True)
                except ValueError:
                    raise ParseError(
                        f"{path}: line {line_no}, column {col + 1}: non-numeric cell {cell!r}"
                    ) from None
            rows.append(parsed)
            mask_rows.append(valid)
    if not rows or width == 0:
        raise ParseError(f"{path}: empty series file")
    adjacency = _load_adjacency(adjacency_path)
    if adjacency.shape[0] != width:
        raise ParseError(
            f"adjacency is {adjacency.shape[0]}x{adjacency.shape[1]} but series has {width} nodes"
        )
    return SeriesDataset(
        values=np.asarray(rows)[:, :, None],
        graph=GraphSpec(adjacency=adjacency),
        valid_mask=np.asarray(mask_rows, dtype=bool),
    )


def _load_adjacency(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for line_no, cells in enumerate(csv.reader(fh), start=1):
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise ParseError(f"{path}: line {line_no}: non-numeric adjacency cell") from None
    a = np.asarray(rows)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ParseError(f"{path}: adjacency must be square, got {a.shape}")
    return a


def write_csv_series(dataset: SeriesDataset, series_path, adjacency_path) -> None:
    """Inverse of load_csv_series for feature 0; masked cells become NaN."""
    with open(series_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for t in range(dataset.values.shape[0]):
            writer.writerow(
                [
                    repr(float(dataset.values[t, n, 0])) if dataset.valid_mask[t, n] else "NaN"
                    for n in range(dataset.graph.n_nodes)
                ]
            )
    with open(adjacency_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in dataset.graph.adjacency:
            writer.writerow([repr(float(v)) for v in row])
