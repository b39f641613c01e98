"""Paired comparison of likelihood-trained vs covariance-trained CNPs on the
1-d line-curve task, with an exact GP posterior as reference.

Both arms see identical seeded episode streams; they differ only in the
training objective.
"""

from __future__ import annotations

import copy
import json
import os

import numpy as np

from ..gp import GpModel, RbfKernel, gp_posterior
from .config import ExperimentConfig
from .training import episode_rng, sample_line_episode, train


def gp_reference(cfg: ExperimentConfig, seed: int) -> dict:
    """Exact GP posterior RMSE on the same test episodes the arms see."""
    model = GpModel(kernel=RbfKernel(lengthscale=1.0, signal_var=1.0), noise_var=1e-6)
    rng = episode_rng(cfg.data.seed, seed, 2)
    target_sq, context_sq = [], []
    for _ in range(cfg.eval.n_eval_episodes):
        ctx, y = sample_line_episode(rng, cfg.data)
        mean_t, _ = gp_posterior(model, ctx.context_x, ctx.context_y[:, 0], ctx.target_x)
        target_sq.append(np.mean((mean_t - y[:, 0]) ** 2))
        mean_c, _ = gp_posterior(model, ctx.context_x, ctx.context_y[:, 0], ctx.context_x)
        context_sq.append(np.mean((mean_c - ctx.context_y[:, 0]) ** 2))
    return {
        "rmse_targets": float(np.sqrt(np.mean(target_sq))),
        "rmse_contexts": float(np.sqrt(np.mean(context_sq))),
    }


def run_cnp_comparison(cfg: ExperimentConfig, seed: int | None = None, out_dir: str | None = None) -> dict:
    """Train the likelihood arm and the covariance arm on identical episodes."""
    seed = cfg.seeds[0] if seed is None else seed
    out_dir = out_dir or cfg.out_dir
    if cfg.model.kind != "cnp" or cfg.data.source != "lines":
        raise ValueError("cnp comparison needs model.kind=cnp and data.source=lines")

    nll_cfg = copy.deepcopy(cfg)
    nll_cfg.objective = "nll"
    cov_cfg = copy.deepcopy(cfg)
    cov_cfg.objective = "mse_plus_cov"

    nll_result = train(nll_cfg, seed=seed, out_dir=None)
    cov_result = train(cov_cfg, seed=seed, out_dir=None)
    comparison = {
        "seed": seed,
        "nll_arm": {"metrics": nll_result.metrics, "n_steps": nll_result.n_steps},
        "cov_arm": {"metrics": cov_result.metrics, "n_steps": cov_result.n_steps},
        "gp_reference": gp_reference(cfg, seed),
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        nll_result.save(os.path.join(out_dir, f"result_nll_seed{seed}.json"))
        cov_result.save(os.path.join(out_dir, f"result_cov_seed{seed}.json"))
        with open(os.path.join(out_dir, f"cnp_compare_seed{seed}.json"), "w") as fh:
            json.dump(comparison, fh, indent=2, sort_keys=True)
    comparison["_results"] = {"nll": nll_result, "cov": cov_result}
    return comparison
