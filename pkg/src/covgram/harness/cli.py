"""Command-line entry point.

Subcommands: gen-data, train, eval, diagnose, gp-fit, sweep, cnp-compare.
Every config leaf can be overridden as ``--section.key=value``.
Exit codes: 0 success, 2 config/usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .. import data as D
from .. import tensor as T
from ..diagnostics import alignment_trace, basis_decomposition_trace, cross_term_report
from ..gp import GpModel, IndefiniteKernelError, RbfKernel, gp_posterior, log_marginal_likelihood
from ..models import CheckpointError, load_checkpoint
from .cnp_compare import run_cnp_comparison
from .config import ConfigError, load_config, parse_override_args
from .metrics import EmptyEvaluationError
from .sweeps import sweep
from .training import DivergenceError, _eval_forecaster, build_dataset, build_model, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covgram", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_checkpoint in (
        ("gen-data", False),
        ("train", False),
        ("eval", True),
        ("diagnose", True),
        ("gp-fit", False),
        ("sweep", False),
        ("cnp-compare", False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML experiment config")
        p.add_argument("--out", default=None, help="output directory")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True)
        if name == "diagnose":
            p.add_argument(
                "--kind",
                default="cross-term",
                choices=["cross-term", "alignment", "basis-decomposition"],
            )
            p.add_argument("--nodes", default="0,1", help="comma-separated node ids")
        if name == "gp-fit":
            p.add_argument("--node", type=int, default=0)
            p.add_argument("--fit-ticks", type=int, default=96)
            p.add_argument("--test-ticks", type=int, default=48)
    return parser


def _load(args, extra) -> tuple:
    cfg = load_config(args.config, parse_override_args(extra))
    out = args.out or cfg.out_dir
    if out:
        os.makedirs(out, exist_ok=True)
    return cfg, out


def _cmd_gen_data(args, extra) -> int:
    cfg, out = _load(args, extra)
    out = out or "runs/gen-data"
    os.makedirs(out, exist_ok=True)
    dataset = build_dataset(cfg)
    D.write_csv_series(dataset, os.path.join(out, "series.csv"), os.path.join(out, "adjacency.csv"))
    meta = {k: v for k, v in dataset.metadata.items() if k != "true_correlation"}
    meta["shape"] = list(dataset.values.shape)
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"wrote series/adjacency/meta to {out}")
    return EXIT_OK


def _cmd_train(args, extra) -> int:
    cfg, out = _load(args, extra)
    result = train(cfg, seed=cfg.seeds[0], out_dir=out or "runs/train")
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _restore_forecaster(cfg, checkpoint):
    dataset = build_dataset(cfg)
    splits = D.window_and_split(
        dataset,
        t_in=cfg.data.t_in,
        t_out=cfg.data.t_out,
        ratios=tuple(cfg.data.ratios),
        batch_size=cfg.optimizer.batch_size,
        seed=cfg.seeds[0],
    )
    model = build_model(cfg, cfg.seeds[0], graph=dataset.graph)
    model.load_state(load_checkpoint(checkpoint))
    return model, splits


def _cmd_eval(args, extra) -> int:
    cfg, out = _load(args, extra)
    if cfg.model.kind != "stgcn_lite":
        raise ConfigError("eval currently supports forecasting checkpoints (model.kind=stgcn_lite)")
    model, splits = _restore_forecaster(cfg, args.checkpoint)
    metrics = _eval_forecaster(model, splits, "test", cfg)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if out:
        with open(os.path.join(out, "eval.json"), "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def _cmd_diagnose(args, extra) -> int:
    cfg, out = _load(args, extra)
    out = out or "runs/diagnose"
    os.makedirs(out, exist_ok=True)
    model, splits = _restore_forecaster(cfg, args.checkpoint)
    nodes = [int(n) for n in args.nodes.split(",")]
    n_windows = min(cfg.eval.diagnostic_windows, splits.n_windows("test"))
    stream = lambda: (b for i, b in enumerate(splits.eval_batches("test", batch_size=1)) if i < n_windows)
    if args.kind == "cross-term":
        rows = []
        for i, batch in enumerate(splits.eval_batches("test", batch_size=1)):
            if i >= cfg.eval.cross_term_windows:
                break
            T.new_tape()
            rows.append(model.forward(T.Tensor(batch.x)).basis.data)
        report = cross_term_report(
            np.concatenate(rows), model.params["head_w"], max_pairs=cfg.eval.max_pairs
        )
        report.save_json(os.path.join(out, "cross_term.json"))
        print(f"zero_fraction={report.zero_fraction:.4f} epsilon={report.epsilon:.3e}")
    elif args.kind == "alignment":
        pairs = [(nodes[i], nodes[i + 1]) for i in range(len(nodes) - 1)] or [(0, 1)]
        trace = alignment_trace(model, stream(), pairs, cfg.covloss)
        trace.to_csv(os.path.join(out, "alignment.csv"))
        print(f"mean frobenius gap {float(np.mean(trace.frobenius_gap)):.4f}")
    else:
        for node in nodes:
            trace = basis_decomposition_trace(model, stream(), node)
            trace.to_csv(os.path.join(out, f"basis_node{node}.csv"))
            active = trace.active_correlations()
            median = float(np.median(active)) if active.size else 0.0
            print(f"node {node}: median |corr(component, prediction)| = {median:.4f}")
    return EXIT_OK


def _cmd_gp_fit(args, extra) -> int:
    cfg, out = _load(args, extra)
    out = out or "runs/gp-fit"
    os.makedirs(out, exist_ok=True)
    dataset = build_dataset(cfg)
    series = dataset.values[:, args.node, 0]
    n_fit, n_test = args.fit_ticks, args.test_ticks
    x_fit = np.arange(n_fit, dtype=np.float64)[:, None] / 12.0
    y_mean, y_std = series[:n_fit].mean(), max(series[:n_fit].std(), 1e-12)
    y_fit = (series[:n_fit] - y_mean) / y_std
    x_test = np.arange(n_fit, n_fit + n_test, dtype=np.float64)[:, None] / 12.0
    y_test = (series[n_fit : n_fit + n_test] - y_mean) / y_std
    best = None
    for lengthscale in (0.25, 0.5, 1.0, 2.0, 4.0):
        for noise in (1e-4, 1e-2, 1e-1):
            model = GpModel(kernel=RbfKernel(lengthscale=lengthscale), noise_var=noise)
            ll = log_marginal_likelihood(model, x_fit, y_fit)
            if best is None or ll > best["log_likelihood"]:
                mean, _ = gp_posterior(model, x_fit, y_fit, x_test)
                best = {
                    "lengthscale": lengthscale,
                    "noise_var": noise,
                    "log_likelihood": ll,
                    "posterior_rmse": float(np.sqrt(np.mean((mean - y_test) ** 2))),
                }
    with open(os.path.join(out, "gp_fit.json"), "w") as fh:
        json.dump(best, fh, indent=2, sort_keys=True)
    print(json.dumps(best, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_sweep(args, extra) -> int:
    cfg, out = _load(args, extra)
    result = sweep(cfg, out_dir=out or "runs/sweep")
    print(f"{len(result.rows)} runs over axis '{result.axis}'")
    return EXIT_OK


def _cmd_cnp_compare(args, extra) -> int:
    cfg, out = _load(args, extra)
    out = out or "runs/cnp-compare"
    for seed in cfg.seeds:
        comparison = run_cnp_comparison(cfg, seed=seed, out_dir=out)
        print(
            f"seed {seed}: nll arm {comparison['nll_arm']['metrics']} | "
            f"cov arm {comparison['cov_arm']['metrics']} | gp {comparison['gp_reference']}"
        )
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "diagnose": _cmd_diagnose,
    "gp-fit": _cmd_gp_fit,
    "sweep": _cmd_sweep,
    "cnp-compare": _cmd_cnp_compare,
}


def main(argv=None) -> int:
    args, extra = _parser().parse_known_args(argv)
    try:
        return _COMMANDS[args.command](args, extra)
    except (ConfigError, D.DataError, CheckpointError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (
        DivergenceError,
        T.DomainError,
        IndefiniteKernelError,
        EmptyEvaluationError,
    ) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
