"""Seeded training loops for the three model/task families, with
best-validation checkpointing, divergence handling, and run artifacts.

Every run is fully determined by (config, seed): dataset generation uses the
dataset's own seed, while initialization, shuffling, and episode sampling
derive from the run seed.  Wall time and peak memory are the only
non-deterministic fields in a result.
"""

from __future__ import annotations

import json
import os
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .. import covloss as C
from .. import data as D
from .. import tensor as T
from ..diagnostics import alignment_trace, basis_decomposition_trace, cross_term_report
from ..models import CNPLite, CnpContext, MLP, STGCNLite, cnp_nll, save_checkpoint
from .config import ExperimentConfig
from .metrics import accuracy, evaluate_metrics, per_horizon_metrics

RESULT_SCHEMA_VERSION = 1
TIMING_FIELDS = ("wall_time_s", "peak_mem_bytes")


class DivergenceError(ArithmeticError):
    """Training loss left the finite domain; carries the last good checkpoint."""

    def __init__(self, step: int, checkpoint_path: str | None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        where = f" (last good checkpoint: {checkpoint_path})" if checkpoint_path else ""
        super().__init__(f"training diverged at step {step}{where}")


@dataclass
class RunResult:
    config: dict
    seed: int
    task: str
    metrics: dict
    loss_curve: list[float]
    val_curve: list[float]
    best_epoch: int
    n_steps: int
    diagnostics: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    peak_mem_bytes: int = 0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "result_schema_version": RESULT_SCHEMA_VERSION,
            "config": self.config,
            "seed": self.seed,
            "task": self.task,
            "metrics": self.metrics,
            "loss_curve": self.loss_curve,
            "val_curve": self.val_curve,
            "best_epoch": self.best_epoch,
            "n_steps": self.n_steps,
            "diagnostics": self.diagnostics,
        }
        if include_timing:
            d["wall_time_s"] = self.wall_time_s
            d["peak_mem_bytes"] = self.peak_mem_bytes
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, params: dict, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params.values():
            g = p.grad
            if g is not None:
                p.data = p.data - self.lr * g.data


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g.data
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g.data**2
            m_hat = self.m[name] / (1 - self.b1**t)
            v_hat = self.v[name] / (1 - self.b2**t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: ExperimentConfig, params: dict):
    if cfg.optimizer.kind == "adam":
        return Adam(params, cfg.optimizer.lr)
    return SGD(params, cfg.optimizer.lr)


# ---------------------------------------------------------------------------
# shared pieces


def build_dataset(cfg: ExperimentConfig) -> D.SeriesDataset:
    """Series dataset for forecasting runs, with optional node-noise injection."""
    d = cfg.data
    if d.source == "traffic":
        dataset = D.generate_traffic_like(
            n_nodes=d.n_nodes,
            t_total=d.t_total,
            graph_kind=d.graph,
            seed=d.seed,
            noise_sigma=d.noise_sigma,
            diffusion=d.diffusion,
        )
    elif d.source == "csv":
        dataset = D.load_csv_series(d.series_csv, d.adjacency_csv)
    else:
        raise ValueError(f"no series dataset for source '{d.source}'")
    if d.noisy_nodes:
        rng = np.random.default_rng([d.seed, 7])
        nodes = rng.choice(dataset.graph.n_nodes, size=d.noisy_nodes, replace=False)
        dataset = D.inject_node_noise(dataset, nodes, mode=d.noise_mode, seed=d.seed + 1)
    return dataset


def build_model(cfg: ExperimentConfig, seed: int, graph=None, in_dim=None, out_dim=None):
    m = cfg.model
    if m.kind == "stgcn_lite":
        return STGCNLite(
            graph,
            t_in=cfg.data.t_in,
            horizons=cfg.data.t_out,
            channels=m.channels,
            basis_dim=m.basis_dim,
            kernel_size=m.kernel_size,
            activation=m.activation,
            init_scale=m.init_scale,
            seed=seed,
        )
    if m.kind == "mlp":
        return MLP(in_dim, list(m.hidden) + [m.basis_dim], out_dim, activation=m.activation, seed=seed)
    if m.kind == "cnp":
        return CNPLite(
            repr_dim=m.repr_dim,
            enc_hidden=list(m.hidden),
            dec_hidden=list(m.hidden[:-1]) + [m.basis_dim] if m.hidden else [m.basis_dim],
            activation=m.activation,
            seed=seed,
        )
    raise ValueError(f"unknown model kind '{m.kind}'")


def batch_loss(output, y_rows: T.Tensor, objective: str, covcfg: C.CovLossConfig):
    """Training loss for one batch; the mse path builds the identical graph
    that the combined objective reduces to at lam == 0."""
    if objective == "mse":
        return C.mse(output.prediction_rows, y_rows)
    views = C.make_batch_views(output.basis, output.prediction_rows, y_rows, output.row_index, covcfg)
    return C.combined_objective(output.prediction_rows, y_rows, views, output.last_weights, covcfg)




class _Memory:
    """Peak traced allocation inside the block, nestable."""

    def __enter__(self):
        self.started = not tracemalloc.is_tracing()
        if self.started:
            tracemalloc.start()
        else:
            tracemalloc.reset_peak()
        return self

    def __exit__(self, *exc):
        self.peak = tracemalloc.get_traced_memory()[1]
        if self.started:
            tracemalloc.stop()
        return False


def _finalize(result: RunResult, out_dir, model) -> RunResult:
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result.save(os.path.join(out_dir, "result.json"))
        save_checkpoint(model.params, os.path.join(out_dir, "checkpoint_best.txt"))
        with open(os.path.join(out_dir, "trace.csv"), "w") as fh:
            fh.write("step,train_loss\n")
            for i, v in enumerate(result.loss_curve):
                fh.write(f"{i},{v!r}\n")
    return result


def _save_last_good(state, out_dir) -> str | None:
    if not out_dir:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "checkpoint_last_good.txt")
    save_checkpoint(state, path)
    return path


def train(cfg: ExperimentConfig, seed: int | None = None, out_dir: str | None = None, step_callback=None) -> RunResult:
    """Run one seeded training job and return its result bundle.

    ``step_callback(step, model, batch, loss_value)`` is invoked after each
    update with the pre-update parameters still recoverable from the tape;
    tests use it to recompute the logged loss independently.
    """
    seed = cfg.seeds[0] if seed is None else seed
    out_dir = out_dir or cfg.out_dir
    start = time.perf_counter()
    with _Memory() as memory:
        if cfg.model.kind == "stgcn_lite":
            result = _train_forecaster(cfg, seed, out_dir, step_callback)
        elif cfg.model.kind == "mlp":
            result = _train_classifier(cfg, seed, out_dir, step_callback)
        elif cfg.model.kind == "cnp":
            result = _train_cnp(cfg, seed, out_dir, step_callback)
        else:
            raise ValueError(f"unknown model kind '{cfg.model.kind}'")
    result.wall_time_s = time.perf_counter() - start
    result.peak_mem_bytes = int(memory.peak)
    if out_dir:
        result.save(os.path.join(out_dir, "result.json"))
    return result


# ---------------------------------------------------------------------------
# forecasting (series + stgcn)


def _train_forecaster(cfg, seed, out_dir, step_callback) -> RunResult:
    dataset = build_dataset(cfg)
    splits = D.window_and_split(
        dataset,
        t_in=cfg.data.t_in,
        t_out=cfg.data.t_out,
        ratios=tuple(cfg.data.ratios),
        batch_size=cfg.optimizer.batch_size,
        seed=seed,
    )
    model = build_model(cfg, seed, graph=dataset.graph)
    init_state = model.state()
    optimizer = make_optimizer(cfg, model.params)

    def val_score() -> float:
        m = _eval_forecaster(model, splits, "val", cfg)
        return m["overall"]["rmse"]

    loss_curve, val_curve = [], []
    best_state, best_score, best_epoch = model.state(), float("inf"), -1
    patience_left = cfg.eval.patience
    step = 0
    epoch = 0
    stop = cfg.optimizer.steps == 0
    while not stop:
        for batch in splits.train_batches(epoch):
            T.new_tape()
            x = T.Tensor(batch.x)
            y_rows = T.Tensor(batch.y.reshape(-1, batch.y.shape[-1]))
            try:
                output = model.forward(x)
                loss = batch_loss(output, y_rows, cfg.objective, cfg.covloss)
                value = loss.item()
                if not np.isfinite(value):
                    raise T.DomainError("non-finite loss")
                T.backward(loss)
                optimizer.step()
            except T.DomainError as err:
                path = _save_last_good(best_state if best_epoch >= 0 else init_state, out_dir)
                raise DivergenceError(step, path) from err
            loss_curve.append(value)
            if step_callback is not None:
                step_callback(step, model, batch, value)
            step += 1
            if step >= cfg.optimizer.steps:
                stop = True
                break
        score = val_score()
        val_curve.append(score)
        if score < best_score:
            best_score, best_state, best_epoch = score, model.state(), epoch
            patience_left = cfg.eval.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                stop = True
        epoch += 1
    if best_epoch < 0:
        best_state = model.state()
        best_epoch = 0
    model.load_state(best_state)

    metrics = _eval_forecaster(model, splits, "test", cfg)
    diagnostics = _forecast_diagnostics(cfg, model, init_state, splits)
    return _finalize(
        RunResult(
            config=cfg.to_dict(),
            seed=seed,
            task="forecast",
            metrics=metrics,
            loss_curve=loss_curve,
            val_curve=val_curve,
            best_epoch=best_epoch,
            n_steps=step,
            diagnostics=diagnostics,
        ),
        out_dir,
        model,
    )


def _eval_forecaster(model, splits: D.WindowedSplits, split: str, cfg) -> dict:
    preds, trues, masks = [], [], []
    for batch in splits.eval_batches(split):
        T.new_tape()
        preds.append(model.forward(T.Tensor(batch.x)).prediction.data)
        trues.append(batch.y)
        masks.append(batch.y_mask)
    pred = splits.inverse_transform_targets(np.concatenate(preds))
    true = splits.inverse_transform_targets(np.concatenate(trues))
    return per_horizon_metrics(pred, true, np.concatenate(masks), cfg.eval.mape_threshold)


def _forecast_diagnostics(cfg, model, init_state, splits: D.WindowedSplits) -> dict:
    n_windows = min(cfg.eval.diagnostic_windows, splits.n_windows("test"))
    if n_windows < 2:
        return {}
    stream = lambda count: (
        b for i, b in enumerate(splits.eval_batches("test", batch_size=1)) if i < count
    )
    pairs = [(0, 1)]
    final_trace = alignment_trace(model, stream(n_windows), pairs, cfg.covloss)
    final_gap = float(np.mean(final_trace.frobenius_gap))
    trained_state = model.state()
    model.load_state(init_state)
    init_trace = alignment_trace(model, stream(n_windows), pairs, cfg.covloss)
    model.load_state(trained_state)
    init_gap = float(np.mean(init_trace.frobenius_gap))

    rows = []
    for i, batch in enumerate(splits.eval_batches("test", batch_size=1)):
        if i >= cfg.eval.cross_term_windows:
            break
        T.new_tape()
        rows.append(model.forward(T.Tensor(batch.x)).basis.data)
    report = cross_term_report(
        np.concatenate(rows), model.params["head_w"], max_pairs=cfg.eval.max_pairs, seed=0
    )

    correlations = []
    n_probe = min(6, model.graph.n_nodes)
    for node in range(n_probe):
        trace = basis_decomposition_trace(model, stream(n_windows), node)
        correlations.extend(trace.active_correlations().tolist())
    return {
        "frobenius_gap_init": init_gap,
        "frobenius_gap_final": final_gap,
        "zero_fraction": report.zero_fraction,
        "cross_term_epsilon": report.epsilon,
        "basis_pred_corr_median": float(np.median(correlations)) if correlations else 0.0,
    }


# ---------------------------------------------------------------------------
# classification (blobs + mlp)


def _train_classifier(cfg, seed, out_dir, step_callback) -> RunResult:
    d = cfg.data
    blobs = D.generate_toy_classification(
        n_classes=d.n_classes, n_per_class=d.n_per_class, spread=d.spread, seed=d.seed, dim=d.dim
    )
    n = blobs.x.shape[0]
    n_train, n_val = int(0.7 * n), int(0.1 * n)
    subsets = {
        "train": slice(0, n_train),
        "val": slice(n_train, n_train + n_val),
        "test": slice(n_train + n_val, n),
    }
    model = build_model(cfg, seed, in_dim=d.dim, out_dim=d.n_classes)
    init_state = model.state()
    optimizer = make_optimizer(cfg, model.params)

    def forward_split(split: str):
        T.new_tape()
        idx = subsets[split]
        return model.forward(T.Tensor(blobs.x[idx])), blobs.labels[idx]

    loss_curve, val_curve = [], []
    best_state, best_score, best_epoch = model.state(), -1.0, -1
    patience_left = cfg.eval.patience
    bs = cfg.optimizer.batch_size
    batches_per_epoch = max(1, n_train // bs)
    step, epoch = 0, 0
    stop = cfg.optimizer.steps == 0
    while not stop:
        order = np.random.default_rng([seed, epoch]).permutation(n_train)
        for start in range(0, batches_per_epoch * bs, bs):
            pick = order[start : start + bs]
            if pick.size < 2:
                continue
            T.new_tape()
            x = T.Tensor(blobs.x[pick])
            y = T.Tensor(blobs.labels_onehot[pick])
            try:
                output = model.forward(x)
                loss = batch_loss(output, y, cfg.objective, cfg.covloss)
                value = loss.item()
                if not np.isfinite(value):
                    raise T.DomainError("non-finite loss")
                T.backward(loss)
                optimizer.step()
            except T.DomainError as err:
                path = _save_last_good(best_state if best_epoch >= 0 else init_state, out_dir)
                raise DivergenceError(step, path) from err
            loss_curve.append(value)
            if step_callback is not None:
                step_callback(step, model, (blobs.x[pick], blobs.labels_onehot[pick]), value)
            step += 1
            if step >= cfg.optimizer.steps:
                stop = True
                break
        out, labels = forward_split("val")
        score = accuracy(out.prediction.data, labels)
        val_curve.append(score)
        if score > best_score:
            best_score, best_state, best_epoch = score, model.state(), epoch
            patience_left = cfg.eval.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                stop = True
        epoch += 1
    if best_epoch < 0:
        best_state, best_epoch = model.state(), 0
    model.load_state(best_state)

    out, labels = forward_split("test")
    test_idx = np.arange(n)[subsets["test"]]
    ambiguous = np.isin(test_idx, blobs.ambiguous_idx)
    logits = out.prediction.data
    metrics = {
        "accuracy": accuracy(logits, labels),
        "accuracy_ambiguous": accuracy(logits[ambiguous], labels[ambiguous])
        if ambiguous.any()
        else float("nan"),
    }
    diagnostics = _classifier_diagnostics(cfg, out, labels)
    return _finalize(
        RunResult(
            config=cfg.to_dict(),
            seed=seed,
            task="classify",
            metrics=metrics,
            loss_curve=loss_curve,
            val_curve=val_curve,
            best_epoch=best_epoch,
            n_steps=step,
            diagnostics=diagnostics,
        ),
        out_dir,
        model,
    )


def _classifier_diagnostics(cfg, output, labels) -> dict:
    basis = output.basis.data
    scale = C.weight_variance(output.last_weights) if cfg.covloss.sigma_mode is C.SigmaMode.MEASURED_LAST_LAYER else 1.0
    gram = scale * (basis @ basis.T)
    same = np.equal.outer(labels, labels)
    off_diag = ~np.eye(len(labels), dtype=bool)
    report = cross_term_report(basis, output.last_weights, max_pairs=cfg.eval.max_pairs, seed=0)
    return {
        "gram_same_class_mean": float(gram[same & off_diag].mean()),
        "gram_cross_class_mean": float(gram[~same].mean()),
        "zero_fraction": report.zero_fraction,
        "cross_term_epsilon": report.epsilon,
    }


# ---------------------------------------------------------------------------
# 1-d episodes (lines + cnp)


def episode_rng(data_seed: int, run_seed: int, stream: int) -> np.random.Generator:
    """Streams: 0 train, 1 validation, 2 test."""
    return np.random.default_rng([data_seed, run_seed, stream])


def sample_line_episode(rng: np.random.Generator, d) -> tuple[CnpContext, np.ndarray]:
    """Random-slope/intercept line with a random context subset of targets."""
    lo, hi = d.x_range
    slope = rng.uniform(-1.0, 1.0)
    intercept = rng.uniform(-1.0, 1.0)
    x = np.sort(rng.uniform(lo, hi, size=d.n_targets))[:, None]
    y = slope * x + intercept
    n_ctx = int(rng.integers(d.context_min, d.context_max + 1))
    ctx_idx = rng.choice(d.n_targets, size=n_ctx, replace=False)
    return CnpContext(x[ctx_idx], y[ctx_idx], x), y


def _cnp_episode_metrics(model, episodes) -> dict:
    nlls, sqerrs = [], []
    for ctx, y in episodes:
        T.new_tape()
        mu, log_sigma, _ = model.forward(ctx)
        nlls.append(cnp_nll(mu, log_sigma, T.Tensor(y)).item())
        sqerrs.append(np.mean((mu.data - y) ** 2))
    return {"nll": float(np.mean(nlls)), "rmse": float(np.sqrt(np.mean(sqerrs)))}


def _train_cnp(cfg, seed, out_dir, step_callback) -> RunResult:
    d = cfg.data
    model = build_model(cfg, seed)
    init_state = model.state()
    optimizer = make_optimizer(cfg, model.params)
    train_stream = episode_rng(d.seed, seed, 0)
    val_rng = episode_rng(d.seed, seed, 1)
    val_episodes = [sample_line_episode(val_rng, d) for _ in range(40)]
    test_rng = episode_rng(d.seed, seed, 2)
    test_episodes = [sample_line_episode(test_rng, d) for _ in range(cfg.eval.n_eval_episodes)]

    loss_curve, val_curve = [], []
    best_state, best_score, best_epoch = model.state(), float("inf"), -1
    patience_left = cfg.eval.patience
    eval_every = max(1, cfg.optimizer.steps // 10)
    step = 0
    stop = cfg.optimizer.steps == 0
    while not stop:
        ctx, y = sample_line_episode(train_stream, d)
        T.new_tape()
        y_t = T.Tensor(y)
        try:
            mu, log_sigma, output = model.forward(ctx)
            if cfg.objective == "nll":
                loss = cnp_nll(mu, log_sigma, y_t)
            else:
                loss = batch_loss(output, y_t, cfg.objective, cfg.covloss)
            value = loss.item()
            if not np.isfinite(value):
                raise T.DomainError("non-finite loss")
            T.backward(loss)
            optimizer.step()
        except T.DomainError as err:
            path = _save_last_good(best_state if best_epoch >= 0 else init_state, out_dir)
            raise DivergenceError(step, path) from err
        loss_curve.append(value)
        if step_callback is not None:
            step_callback(step, model, (ctx, y), value)
        step += 1
        if step % eval_every == 0 or step >= cfg.optimizer.steps:
            score = _cnp_episode_metrics(model, val_episodes)["rmse"]
            val_curve.append(score)
            if score < best_score:
                best_score, best_state, best_epoch = score, model.state(), len(val_curve) - 1
                patience_left = cfg.eval.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    stop = True
        if step >= cfg.optimizer.steps:
            stop = True
    if best_epoch < 0:
        best_state, best_epoch = model.state(), 0
    model.load_state(best_state)
    metrics = _cnp_episode_metrics(model, test_episodes)
    return _finalize(
        RunResult(
            config=cfg.to_dict(),
            seed=seed,
            task="cnp",
            metrics=metrics,
            loss_curve=loss_curve,
            val_curve=val_curve,
            best_epoch=best_epoch,
            n_steps=step,
            diagnostics={},
        ),
        out_dir,
        model,
    )
