"""Sweep runner: one axis (lambda, noise_nodes, batch_size), paired
baseline/treatment arms, per-run and summary CSV emission with stable
headers, plus an isolated covariance-term cost probe.
"""

from __future__ import annotations

import copy
import csv
import os
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .. import covloss as C
from .. import tensor as T
from .config import ExperimentConfig
from .training import RunResult, train

RUNS_CSV_HEADER = [
    "axis",
    "value",
    "arm",
    "seed",
    "mae",
    "rmse",
    "mape",
    "accuracy",
    "nll",
    "wall_time_s",
    "peak_mem_bytes",
    "covterm_time_s",
    "covterm_peak_bytes",
]

SUMMARY_CSV_HEADER = [
    "axis",
    "value",
    "arm",
    "n_seeds",
    "mae_mean",
    "mae_std",
    "rmse_mean",
    "rmse_std",
    "mape_mean",
    "mape_std",
    "accuracy_mean",
    "accuracy_std",
    "nll_mean",
    "nll_std",
    "wall_time_s_mean",
    "peak_mem_bytes_max",
    "covterm_time_s",
    "covterm_peak_bytes",
]


@dataclass
class SweepResult:
    axis: str
    rows: list[dict] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    results: dict = field(default_factory=dict)  # (value, arm, seed) -> RunResult

    def save_csv(self, runs_path, summary_path) -> None:
        _write_csv(runs_path, RUNS_CSV_HEADER, self.rows)
        _write_csv(summary_path, SUMMARY_CSV_HEADER, self.summary)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, restval="")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in header})


def _flat_metrics(result: RunResult) -> dict:
    out = {}
    if result.task == "forecast":
        out.update(result.metrics["overall"])
    else:
        out.update(result.metrics)
    return {k: out.get(k, "") for k in ("mae", "rmse", "mape", "accuracy", "nll")}


def _arm_configs(cfg: ExperimentConfig, axis: str, value):
    """(arm name, config) pairs for one axis value."""
    arms = []
    if axis == "lambda":
        c = copy.deepcopy(cfg)
        c.objective = "mse_plus_cov"
        c.covloss.lam = float(value)
        arms.append((f"lam={value:g}", c))
        return arms
    for arm, lam in (("baseline", 0.0), ("treatment", cfg.covloss.lam)):
        c = copy.deepcopy(cfg)
        c.objective = "mse_plus_cov"
        c.covloss.lam = lam
        if axis == "noise_nodes":
            c.data.noisy_nodes = int(value)
        elif axis == "batch_size":
            c.optimizer.batch_size = int(value)
        else:
            raise ValueError(f"unknown sweep axis '{axis}'")
        arms.append((arm, c))
    return arms


def sweep(cfg: ExperimentConfig, out_dir: str | None = None) -> SweepResult:
    """One seeded run per (axis value, arm, seed); emits runs/summary CSVs."""
    axis = cfg.sweep.axis
    if axis is None or not cfg.sweep.values:
        raise ValueError("config has no sweep axis/values")
    out_dir = out_dir or cfg.out_dir
    sweep_result = SweepResult(axis=axis)
    for value in cfg.sweep.values:
        covterm = (
            measure_covterm_cost(
                n_rows=int(value) * (cfg.data.n_nodes if cfg.model.kind == "stgcn_lite" else 1),
                basis_dim=cfg.model.basis_dim,
                n_targets=cfg.data.t_out if cfg.model.kind == "stgcn_lite" else cfg.data.n_classes,
                covcfg=cfg.covloss,
            )
            if axis == "batch_size"
            else None
        )
        for arm, arm_cfg in _arm_configs(cfg, axis, value):
            per_seed = []
            for seed in cfg.seeds:
                result = train(arm_cfg, seed=seed, out_dir=None)
                sweep_result.results[(value, arm, seed)] = result
                row = {
                    "axis": axis,
                    "value": value,
                    "arm": arm,
                    "seed": seed,
                    "wall_time_s": result.wall_time_s,
                    "peak_mem_bytes": result.peak_mem_bytes,
                    **_flat_metrics(result),
                }
                if covterm is not None:
                    row["covterm_time_s"], row["covterm_peak_bytes"] = covterm
                sweep_result.rows.append(row)
                per_seed.append(row)
            summary = {"axis": axis, "value": value, "arm": arm, "n_seeds": len(per_seed)}
            for key in ("mae", "rmse", "mape", "accuracy", "nll"):
                values = [r[key] for r in per_seed if r[key] != ""]
                if values:
                    summary[f"{key}_mean"] = float(np.mean(values))
                    summary[f"{key}_std"] = float(np.std(values))
            summary["wall_time_s_mean"] = float(np.mean([r["wall_time_s"] for r in per_seed]))
            summary["peak_mem_bytes_max"] = int(max(r["peak_mem_bytes"] for r in per_seed))
            if covterm is not None:
                summary["covterm_time_s"], summary["covterm_peak_bytes"] = covterm
            sweep_result.summary.append(summary)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        sweep_result.save_csv(
            os.path.join(out_dir, "sweep_runs.csv"), os.path.join(out_dir, "sweep.csv")
        )
    return sweep_result


def measure_covterm_cost(
    n_rows: int,
    basis_dim: int,
    n_targets: int,
    covcfg: C.CovLossConfig | None = None,
    repeats: int = 3,
    seed: int = 0,
) -> tuple[float, int]:
    """Forward+backward cost of the covariance term alone on a random batch.

    Returns (best wall seconds over repeats, max traced peak bytes).
    """
    covcfg = covcfg or C.CovLossConfig()
    rng = np.random.default_rng(seed)
    basis_values = rng.normal(size=(n_rows, basis_dim))
    target_values = rng.normal(size=(n_rows, n_targets))
    weight_values = rng.normal(size=(basis_dim, n_targets))
    best_time, worst_peak = float("inf"), 0
    for _ in range(repeats):
        tape = T.new_tape()
        basis = T.Tensor(basis_values, requires_grad=True)
        rows = T.Tensor(target_values)
        weights = T.Tensor(weight_values, requires_grad=True)
        views = C.BatchViews(basis, rows, [(i, 0) for i in range(n_rows)])
        started = not tracemalloc.is_tracing()
        if started:
            tracemalloc.start()
        else:
            tracemalloc.reset_peak()
        t0 = time.perf_counter()
        loss = C.covariance_loss(
            C.empirical_covariance(views, covcfg), C.basis_gram(views, weights, covcfg)
        )
        T.backward(loss)
        elapsed = time.perf_counter() - t0
        peak = tracemalloc.get_traced_memory()[1]
        if started:
            tracemalloc.stop()
        best_time = min(best_time, elapsed)
        worst_peak = max(worst_peak, peak)
        del tape
    return best_time, worst_peak
