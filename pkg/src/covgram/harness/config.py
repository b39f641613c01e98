"""Experiment configuration: a versioned YAML key-value tree, every leaf
overridable from the command line as ``--section.key=value``.

Schema (version 1), with defaults:

    config_version: 1
    model:
      kind: stgcn_lite          # mlp | stgcn_lite | cnp
      channels: 8               # stgcn temporal/graph channels
      basis_dim: 8              # exported basis width F'
      kernel_size: 3
      hidden: [32, 32]          # mlp / cnp encoder-decoder widths
      repr_dim: 32              # cnp aggregated representation width
      activation: relu
      init_scale: 1.0           # multiplier on the uniform init bound
    objective: mse_plus_cov     # mse | mse_plus_cov | nll
    covloss:
      lam: 1.0
      mean_mode: residual_zero_mean   # zero_mean | batch_mean
      sigma_mode: measured_last_layer # fixed_one
      detach_target: true
      detach_sigma: true
      row_grouping: flatten_sample_node  # per_node_across_batch
    optimizer:
      kind: sgd                 # adam
      lr: 0.05
      steps: 400
      batch_size: 8
    data:
      source: traffic           # blobs | lines | csv
      seed: 0                   # dataset seed, independent of run seeds
      n_nodes: 20
      t_total: 2880
      graph: ring               # grid | random_geometric
      noise_sigma: 0.5
      diffusion: 0.1
      t_in: 12
      t_out: 3
      ratios: [0.7, 0.1, 0.2]
      noisy_nodes: 0            # inject_node_noise count (traffic)
      noise_mode: replace_white
      n_classes: 4              # blobs
      n_per_class: 60
      spread: 1.0
      dim: 16
      n_targets: 20             # lines (cnp episodes)
      context_min: 3
      context_max: 10
      x_range: [-2.0, 2.0]
      series_csv: null          # csv source paths
      adjacency_csv: null
    seeds: [0, 1, 2]
    sweep:
      axis: null                # lambda | noise_nodes | batch_size
      values: []
    eval:
      mape_threshold: 0.001
      patience: 10
      diagnostic_windows: 48
      cross_term_windows: 6
      max_pairs: 1000000
      n_eval_episodes: 100
    out_dir: null

When ``covloss.mean_mode`` is not given, classification data (blobs) defaults
to zero_mean over the raw one-hot targets and everything else to residuals.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import yaml

from ..covloss import CovLossConfig, MeanMode, RowGrouping, SigmaMode

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Unknown key, bad type, or unsupported value in an experiment config."""


@dataclass
class ModelConfig:
    kind: str = "stgcn_lite"
    channels: int = 8
    basis_dim: int = 8
    kernel_size: int = 3
    hidden: list = field(default_factory=lambda: [32, 32])
    repr_dim: int = 32
    activation: str = "relu"
    init_scale: float = 1.0


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.05
    steps: int = 400
    batch_size: int = 8


@dataclass
class DataConfig:
    source: str = "traffic"
    seed: int = 0
    n_nodes: int = 20
    t_total: int = 2880
    graph: str = "ring"
    noise_sigma: float = 0.5
    diffusion: float = 0.1
    t_in: int = 12
    t_out: int = 3
    ratios: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    noisy_nodes: int = 0
    noise_mode: str = "replace_white"
    n_classes: int = 4
    n_per_class: int = 60
    spread: float = 1.0
    dim: int = 16
    n_targets: int = 20
    context_min: int = 3
    context_max: int = 10
    x_range: list = field(default_factory=lambda: [-2.0, 2.0])
    series_csv: str | None = None
    adjacency_csv: str | None = None


@dataclass
class SweepConfig:
    axis: str | None = None
    values: list = field(default_factory=list)


@dataclass
class EvalConfig:
    mape_threshold: float = 1e-3
    patience: int = 10
    diagnostic_windows: int = 48
    cross_term_windows: int = 6
    max_pairs: int = 1_000_000
    n_eval_episodes: int = 100


_MEAN_MODES = {m.value: m for m in MeanMode}
_SIGMA_MODES = {m.value: m for m in SigmaMode}
_ROW_GROUPINGS = {m.value: m for m in RowGrouping}


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: str = "mse_plus_cov"
    covloss: CovLossConfig = field(default_factory=CovLossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sweep: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str | None = None

    def to_dict(self) -> dict:
        d = {
            "config_version": CONFIG_VERSION,
            "model": asdict(self.model),
            "objective": self.objective,
            "covloss": {
                "lam": self.covloss.lam,
                "mean_mode": self.covloss.mean_mode.value,
                "sigma_mode": self.covloss.sigma_mode.value,
                "detach_target": self.covloss.detach_target,
                "detach_sigma": self.covloss.detach_sigma,
                "row_grouping": self.covloss.row_grouping.value,
            },
            "optimizer": asdict(self.optimizer),
            "data": asdict(self.data),
            "seeds": list(self.seeds),
            "sweep": asdict(self.sweep),
            "eval": asdict(self.eval),
            "out_dir": self.out_dir,
        }
        return d


_VALID = {
    "model.kind": {"mlp", "stgcn_lite", "cnp"},
    "objective": {"mse", "mse_plus_cov", "nll"},
    "optimizer.kind": {"sgd", "adam"},
    "data.source": {"traffic", "blobs", "lines", "csv"},
    "data.graph": {"ring", "grid", "random_geometric"},
    "data.noise_mode": {"replace_white", "add_white"},
    "sweep.axis": {None, "lambda", "noise_nodes", "batch_size"},
}


def _build_section(cls, mapping: dict, path: str):
    known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown key(s) under '{path}': {sorted(unknown)}")
    try:
        return cls(**mapping)
    except TypeError as err:
        raise ConfigError(f"bad '{path}' section: {err}") from None


def _build_covloss(mapping: dict) -> CovLossConfig:
    known = {"lam", "mean_mode", "sigma_mode", "detach_target", "detach_sigma", "row_grouping"}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown key(s) under 'covloss': {sorted(unknown)}")
    out = dict(mapping)
    for key, table in (
        ("mean_mode", _MEAN_MODES),
        ("sigma_mode", _SIGMA_MODES),
        ("row_grouping", _ROW_GROUPINGS),
    ):
        if key in out:
            if out[key] not in table:
                raise ConfigError(f"covloss.{key} must be one of {sorted(table)}, got {out[key]!r}")
            out[key] = table[out[key]]
    if "lam" in out:
        try:
            out["lam"] = float(out["lam"])
        except (TypeError, ValueError):
            raise ConfigError(f"covloss.lam must be a number, got {out['lam']!r}") from None
    try:
        return CovLossConfig(**out)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    version = raw.pop("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version!r}, expected {CONFIG_VERSION}")
    known_top = {"model", "objective", "covloss", "optimizer", "data", "seeds", "sweep", "eval", "out_dir"}
    unknown = set(raw) - known_top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    covloss_raw = dict(raw.get("covloss", {}) or {})
    if "mean_mode" not in covloss_raw and (raw.get("data", {}) or {}).get("source") == "blobs":
        covloss_raw["mean_mode"] = MeanMode.ZERO_MEAN.value
    cfg = ExperimentConfig(
        model=_build_section(ModelConfig, raw.get("model", {}) or {}, "model"),
        objective=raw.get("objective", "mse_plus_cov"),
        covloss=_build_covloss(covloss_raw),
        optimizer=_build_section(OptimizerConfig, raw.get("optimizer", {}) or {}, "optimizer"),
        data=_build_section(DataConfig, raw.get("data", {}) or {}, "data"),
        seeds=list(raw.get("seeds", [0, 1, 2])),
        sweep=_build_section(SweepConfig, raw.get("sweep", {}) or {}, "sweep"),
        eval=_build_section(EvalConfig, raw.get("eval", {}) or {}, "eval"),
        out_dir=raw.get("out_dir"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    flat = {
        "model.kind": cfg.model.kind,
        "objective": cfg.objective,
        "optimizer.kind": cfg.optimizer.kind,
        "data.source": cfg.data.source,
        "data.graph": cfg.data.graph,
        "data.noise_mode": cfg.data.noise_mode,
        "sweep.axis": cfg.sweep.axis,
    }
    for key, value in flat.items():
        if value not in _VALID[key]:
            raise ConfigError(f"{key} must be one of {sorted(str(v) for v in _VALID[key])}, got {value!r}")
    if cfg.optimizer.lr < 0 or cfg.optimizer.steps < 0 or cfg.optimizer.batch_size < 1:
        raise ConfigError("optimizer.lr/steps must be >= 0 and batch_size >= 1")
    if not cfg.seeds:
        raise ConfigError("seeds must be a non-empty list")
    if cfg.sweep.axis is not None and not cfg.sweep.values:
        raise ConfigError(f"sweep.axis {cfg.sweep.axis!r} needs non-empty sweep.values")
    if cfg.objective == "nll" and cfg.model.kind != "cnp":
        raise ConfigError("objective 'nll' is only defined for the cnp model")
    if cfg.data.source == "csv" and not (cfg.data.series_csv and cfg.data.adjacency_csv):
        raise ConfigError("csv source needs data.series_csv and data.adjacency_csv")


def apply_override(raw: dict, dotted: str, text: str) -> None:
    """Set a dotted path in a nested dict, YAML-parsing the value text."""
    keys = dotted.split(".")
    here = raw
    for key in keys[:-1]:
        nxt = here.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot descend into non-mapping at '{key}' for override '{dotted}'")
        here = nxt
    try:
        here[keys[-1]] = yaml.safe_load(text)
    except yaml.YAMLError:
        raise ConfigError(f"cannot parse override value {text!r} for '{dotted}'") from None


def parse_override_args(tokens) -> list[tuple[str, str]]:
    """Turn ['--a.b=1', '--c.d', '2'] style tokens into (path, value) pairs."""
    pairs = []
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r} (overrides look like --section.key=value)")
        body = token[2:]
        if "=" in body:
            path, value = body.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override {token!r} is missing a value")
            path, value = body, tokens[i + 1]
            i += 1
        if not path:
            raise ConfigError(f"empty override path in {token!r}")
        pairs.append((path, value))
        i += 1
    return pairs


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Load a YAML config file (optional) and apply dotted overrides."""
    raw: dict = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping, got {type(loaded).__name__}")
        raw = loaded
    for dotted, text in overrides:
        apply_override(raw, dotted, text)
    return config_from_dict(raw)
