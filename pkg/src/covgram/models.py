"""Model zoo: MLP, a two-block spatio-temporal graph network, and a
conditional-neural-process variant.

Every forward pass returns a :class:`ModelOutput` exposing the penultimate
activation rows (the basis functions) and the final linear map, with the
prediction computed as exactly ``basis @ weights + bias`` so downstream
covariance machinery sees the same quantities the prediction was made from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ModelConfigError(ValueError):
    """Inconsistent layer widths / graph sizes at construction or forward."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


CHECKPOINT_MAGIC = "covgram-checkpoint v1"


# ---------------------------------------------------------------------------
# graph


@dataclass
class GraphSpec:
    """Node set with symmetric adjacency and its normalized propagation matrix.

    The propagation matrix is D^-1/2 (A + I) D^-1/2 with D the degree matrix
    of A + I (self-loops added before normalization).
    """

    adjacency: np.ndarray
    propagation: np.ndarray = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ModelConfigError(f"adjacency must be square, got {a.shape}")
        if not np.array_equal(a, a.T):
            raise ModelConfigError("adjacency must be symmetric")
        if a.min() < 0:
            raise ModelConfigError("adjacency must be non-negative")
        self.adjacency = a
        with_loops = a + np.eye(a.shape[0])
        inv_sqrt_deg = 1.0 / np.sqrt(with_loops.sum(axis=1))
        self.propagation = with_loops * inv_sqrt_deg[:, None] * inv_sqrt_deg[None, :]

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]


# ---------------------------------------------------------------------------
# shared plumbing


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


_ACTIVATIONS = {
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "linear": lambda t: t,
}


def _activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ModelConfigError(f"unknown activation '{name}'") from None


def _linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    out = T.matmul(x, weight)
    if bias is not None:
        out = T.add(out, T.repeat_rows(bias, out.shape[0]))
    return out


@dataclass
class ModelOutput:
    """Forward-pass bundle: prediction plus the basis/readout that built it."""

    prediction: Tensor                    # reporting shape, e.g. [b, N, S]
    prediction_rows: Tensor               # [R, S], aligned with row_index
    basis: Tensor                         # [R, F']
    last_weights: Tensor                  # [F', S]
    head_bias: Tensor | None
    row_index: list[tuple[int, int]]

    def __post_init__(self):
        if len(self.row_index) != self.basis.shape[0]:
            raise ModelConfigError(
                f"row_index length {len(self.row_index)} != basis rows {self.basis.shape[0]}"
            )
        if T.debug_checks_enabled():
            recomputed = self.basis.data @ self.last_weights.data
            if self.head_bias is not None:
                recomputed = recomputed + self.head_bias.data
            if not np.array_equal(recomputed, self.prediction_rows.data):
                raise AssertionError("prediction rows are not exactly basis @ weights + bias")


class _ParamContainer:
    """Name -> Tensor parameter dict plus checkpoint-compatible state I/O."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, values: np.ndarray) -> Tensor:
        p = Tensor(values, requires_grad=True)
        self.params[name] = p
        return p

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise CheckpointError(f"state is missing parameters: {sorted(missing)}")
        for name, p in self.params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.data.shape:
                raise CheckpointError(
                    f"parameter '{name}' has shape {values.shape}, expected {p.data.shape}"
                )
            p.data = np.ascontiguousarray(values)


def save_checkpoint(params: dict[str, Tensor | np.ndarray], path) -> None:
    """Versioned textual checkpoint: magic line, then (name, shape, values)."""
    lines = [CHECKPOINT_MAGIC]
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], Tensor) else np.asarray(params[name])
        shape = ",".join(str(d) for d in arr.shape) or "0"
        lines.append(f"{name} {shape}")
        lines.append(" ".join(repr(float(v)) for v in arr.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint header in {path!r}")
    state: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            name, shape_txt = lines[i].rsplit(" ", 1)
            shape = tuple(int(d) for d in shape_txt.split(",")) if shape_txt != "0" else ()
            values = np.fromstring(lines[i + 1], sep=" ") if lines[i + 1].strip() else np.zeros(0)
        except (ValueError, IndexError) as err:
            raise CheckpointError(f"malformed checkpoint entry at line {i + 1}") from err
        state[name] = values.reshape(shape)
        i += 2
    return state


# ---------------------------------------------------------------------------
# MLP


class MLP(_ParamContainer):
    """Plain fully-connected network exposing its last hidden layer as basis."""

    def __init__(
        self,
        in_dim: int,
        hidden: list[int],
        out_dim: int,
        activation: str = "relu",
        seed: int = 0,
    ):
        super().__init__()
        if not hidden:
            raise ModelConfigError("need at least one hidden layer to expose a basis")
        if in_dim < 1 or out_dim < 1 or any(h < 1 for h in hidden):
            raise ModelConfigError(f"invalid widths: in={in_dim}, hidden={hidden}, out={out_dim}")
        self.in_dim = in_dim
        self.hidden = list(hidden)
        self.out_dim = out_dim
        self.act = _activation(activation)
        rng = np.random.default_rng(seed)
        widths = [in_dim] + self.hidden
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self._add(f"w{i}", glorot_uniform(rng, a, b, (a, b)))
            self._add(f"b{i}", np.zeros(b))
        self._add("head_w", glorot_uniform(rng, self.hidden[-1], out_dim, (self.hidden[-1], out_dim)))
        self._add("head_b", np.zeros(out_dim))

    def forward(self, x: Tensor) -> ModelOutput:
        x = T.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ModelConfigError(f"expected input [b, {self.in_dim}], got {x.shape}")
        h = x
        for i in range(len(self.hidden)):
            h = self.act(_linear(h, self.params[f"w{i}"], self.params[f"b{i}"]))
        rows = _linear(h, self.params["head_w"], self.params["head_b"])
        index = [(i, 0) for i in range(x.shape[0])]
        return ModelOutput(
            prediction=rows,
            prediction_rows=rows,
            basis=h,
            last_weights=self.params["head_w"],
            head_bias=self.params["head_b"],
            row_index=index,
        )


# ---------------------------------------------------------------------------
# graph / temporal primitives


def gcn_layer(
    h: Tensor,
    graph: GraphSpec,
    weight: Tensor,
    bias: Tensor | None = None,
    activation: str = "relu",
) -> Tensor:
    """First-order graph convolution on a single signal: act(P h W + b)."""
    h = T.as_tensor(h)
    if h.data.ndim != 2:
        raise T.ShapeError(f"expected [N, F] signal, got {h.shape}")
    if h.shape[0] != graph.n_nodes:
        raise T.ShapeError(f"signal has {h.shape[0]} rows but graph has {graph.n_nodes} nodes")
    mixed = T.matmul(Tensor(graph.propagation), h)
    return _activation(activation)(_linear(mixed, weight, bias))


def temporal_conv(
    h: Tensor,
    kernel_size: int,
    weight: Tensor,
    bias: Tensor | None = None,
    glu: bool = False,
) -> Tensor:
    """Valid 1-d convolution along time of a [T, N, F] signal.

    ``weight`` is [kernel_size * F, C] (or [kernel_size * F, 2C] with GLU),
    rows ordered by (time offset, feature).
    """
    h = T.as_tensor(h)
    if h.data.ndim != 3:
        raise T.ShapeError(f"expected [T, N, F] signal, got {h.shape}")
    out4 = _temporal_conv4(T.reshape(h, (1,) + h.shape), kernel_size, weight, bias, glu)
    return T.reshape(out4, out4.shape[1:])


def _temporal_conv4(
    x: Tensor, kernel_size: int, weight: Tensor, bias: Tensor | None, glu: bool
) -> Tensor:
    b, t, n, f = x.shape
    if t < kernel_size:
        raise T.ShapeError(f"time extent {t} shorter than kernel {kernel_size}")
    if weight.shape[0] != kernel_size * f:
        raise T.ShapeError(
            f"weight rows {weight.shape[0]} != kernel*features {kernel_size}*{f}"
        )
    t_out = t - kernel_size + 1
    windows = T.concat(
        [T.slice_axis(x, 1, i, i + t_out) for i in range(kernel_size)], axis=3
    )
    flat = T.reshape(windows, (b * t_out * n, kernel_size * f))
    pre = _linear(flat, weight, bias)
    if glu:
        channels = weight.shape[1] // 2
        value = T.slice_axis(pre, 1, 0, channels)
        gate = T.slice_axis(pre, 1, channels, 2 * channels)
        out = T.mul(value, T.sigmoid(gate))
    else:
        channels = weight.shape[1]
        out = pre
    return T.reshape(out, (b, t_out, n, channels))


def _gcn4(x: Tensor, propagation: Tensor, weight: Tensor, bias: Tensor | None, act) -> Tensor:
    b, t, n, f = x.shape
    stacked = T.reshape(T.permute(x, (2, 0, 1, 3)), (n, b * t * f))
    mixed = T.matmul(propagation, stacked)
    back = T.permute(T.reshape(mixed, (n, b, t, f)), (1, 2, 0, 3))
    flat = T.reshape(back, (b * t * n, f))
    return T.reshape(act(_linear(flat, weight, bias)), (b, t, n, weight.shape[1]))


# ---------------------------------------------------------------------------
# STGCN-lite


class STGCNLite(_ParamContainer):
    """Two blocks of (temporal conv, graph conv, temporal conv) plus a
    temporal collapse producing the basis and a linear readout per node.

    Temporal convs are gated (GLU); graph convs and the collapse use ReLU by
    default.  The basis has one row per (sample, node).
    """

    def __init__(
        self,
        graph: GraphSpec,
        t_in: int,
        horizons: int,
        in_features: int = 1,
        channels: int = 8,
        basis_dim: int = 8,
        kernel_size: int = 3,
        activation: str = "relu",
        init_scale: float = 1.0,
        seed: int = 0,
    ):
        super().__init__()
        shrink = 4 * (kernel_size - 1)
        if t_in - shrink < 1:
            raise ModelConfigError(
                f"window {t_in} too small for two blocks of kernel {kernel_size}"
            )
        self.graph = graph
        self.t_in = t_in
        self.horizons = horizons
        self.in_features = in_features
        self.channels = channels
        self.basis_dim = basis_dim
        self.kernel_size = kernel_size
        self.act_name = activation
        self.t_collapse = t_in - shrink
        self._prop = Tensor(graph.propagation)
        rng = np.random.default_rng(seed)
        c, k = channels, kernel_size

        def init(fan_in, fan_out, shape):
            return init_scale * glorot_uniform(rng, fan_in, fan_out, shape)

        def tconv(name: str, f_in: int):
            self._add(f"{name}_w", init(k * f_in, 2 * c, (k * f_in, 2 * c)))
            self._add(f"{name}_b", np.zeros(2 * c))

        tconv("b1_t1", in_features)
        self._add("b1_g_w", init(c, c, (c, c)))
        self._add("b1_g_b", np.zeros(c))
        tconv("b1_t2", c)
        tconv("b2_t1", c)
        self._add("b2_g_w", init(c, c, (c, c)))
        self._add("b2_g_b", np.zeros(c))
        tconv("b2_t2", c)
        self._add(
            "collapse_w",
            init(self.t_collapse * c, basis_dim, (self.t_collapse * c, basis_dim)),
        )
        self._add("collapse_b", np.zeros(basis_dim))
        self._add("head_w", init(basis_dim, horizons, (basis_dim, horizons)))
        self._add("head_b", np.zeros(horizons))

    def _block(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        act = _activation(self.act_name)
        x = _temporal_conv4(x, self.kernel_size, p[f"{prefix}_t1_w"], p[f"{prefix}_t1_b"], glu=True)
        x = _gcn4(x, self._prop, p[f"{prefix}_g_w"], p[f"{prefix}_g_b"], act)
        return _temporal_conv4(x, self.kernel_size, p[f"{prefix}_t2_w"], p[f"{prefix}_t2_b"], glu=True)

    def forward(self, x: Tensor) -> ModelOutput:
        x = T.as_tensor(x)
        if x.data.ndim != 4:
            raise T.ShapeError(f"expected [b, T, N, F] input, got {x.shape}")
        b, t, n, f = x.shape
        if n != self.graph.n_nodes:
            raise T.ShapeError(f"input has {n} nodes but graph has {self.graph.n_nodes}")
        if t != self.t_in or f != self.in_features:
            raise ModelConfigError(
                f"expected [b, {self.t_in}, N, {self.in_features}] input, got {x.shape}"
            )
        h = self._block(self._block(x, "b1"), "b2")
        collapsed = _temporal_conv4(
            h, self.t_collapse, self.params["collapse_w"], self.params["collapse_b"], glu=False
        )
        basis = _activation(self.act_name)(
            T.reshape(collapsed, (b * n, self.basis_dim))
        )
        rows = _linear(basis, self.params["head_w"], self.params["head_b"])
        index = [(s, node) for s in range(b) for node in range(n)]
        return ModelOutput(
            prediction=T.reshape(rows, (b, n, self.horizons)),
            prediction_rows=rows,
            basis=basis,
            last_weights=self.params["head_w"],
            head_bias=self.params["head_b"],
            row_index=index,
        )


# ---------------------------------------------------------------------------
# CNP-lite


@dataclass
class CnpContext:
    """One episode: observed (x, y) pairs plus the prediction locations."""

    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    representation: Tensor | None = None

    def __post_init__(self):
        self.context_x = np.atleast_2d(np.asarray(self.context_x, dtype=np.float64))
        self.context_y = np.atleast_2d(np.asarray(self.context_y, dtype=np.float64))
        self.target_x = np.atleast_2d(np.asarray(self.target_x, dtype=np.float64))
        if self.context_x.shape[0] != self.context_y.shape[0]:
            raise ModelConfigError(
                f"{self.context_x.shape[0]} context inputs vs {self.context_y.shape[0]} outputs"
            )


class CNPLite(_ParamContainer):
    """Permutation-invariant context encoder plus per-target Gaussian decoder.

    Encoder rows are averaged in a canonical (sorted) order so a permuted
    context reproduces bitwise-identical outputs.  The decoder's last hidden
    layer is the exported basis; the mean head is its linear readout.
    """

    def __init__(
        self,
        x_dim: int = 1,
        y_dim: int = 1,
        repr_dim: int = 32,
        enc_hidden: list[int] | None = None,
        dec_hidden: list[int] | None = None,
        activation: str = "relu",
        seed: int = 0,
    ):
        super().__init__()
        enc_hidden = list(enc_hidden or [32, 32])
        dec_hidden = list(dec_hidden or [32, 32])
        if not dec_hidden:
            raise ModelConfigError("decoder needs at least one hidden layer for the basis")
        self.x_dim = x_dim
        self.y_dim = y_dim
        self.repr_dim = repr_dim
        self.enc_widths = [x_dim + y_dim] + enc_hidden + [repr_dim]
        self.dec_widths = [repr_dim + x_dim] + dec_hidden
        self.act = _activation(activation)
        rng = np.random.default_rng(seed)
        for i, (a, b) in enumerate(zip(self.enc_widths[:-1], self.enc_widths[1:])):
            self._add(f"enc_w{i}", glorot_uniform(rng, a, b, (a, b)))
            self._add(f"enc_b{i}", np.zeros(b))
        for i, (a, b) in enumerate(zip(self.dec_widths[:-1], self.dec_widths[1:])):
            self._add(f"dec_w{i}", glorot_uniform(rng, a, b, (a, b)))
            self._add(f"dec_b{i}", np.zeros(b))
        basis_dim = dec_hidden[-1]
        self._add("mu_w", glorot_uniform(rng, basis_dim, y_dim, (basis_dim, y_dim)))
        self._add("mu_b", np.zeros(y_dim))
        self._add("ls_w", glorot_uniform(rng, basis_dim, y_dim, (basis_dim, y_dim)))
        self._add("ls_b", np.zeros(y_dim))

    def forward(self, ctx: CnpContext) -> tuple[Tensor, Tensor, ModelOutput]:
        if ctx.context_x.shape[0] == 0:
            raise ModelConfigError("need at least one context point")
        if ctx.context_x.shape[1] != self.x_dim or ctx.context_y.shape[1] != self.y_dim:
            raise ModelConfigError(
                f"context dims {ctx.context_x.shape[1]}/{ctx.context_y.shape[1]} "
                f"!= model dims {self.x_dim}/{self.y_dim}"
            )
        h = T.concat([Tensor(ctx.context_x), Tensor(ctx.context_y)], axis=1)
        n_enc = len(self.enc_widths) - 1
        for i in range(n_enc):
            h = _linear(h, self.params[f"enc_w{i}"], self.params[f"enc_b{i}"])
            if i < n_enc - 1:
                h = self.act(h)
        # Canonical order before the mean keeps aggregation bitwise
        # permutation-invariant.
        keys = tuple(ctx.context_y[:, j] for j in reversed(range(self.y_dim))) + tuple(
            ctx.context_x[:, j] for j in reversed(range(self.x_dim))
        )
        order = np.lexsort(keys)
        r = T.reduce_mean(T.gather_rows(h, order), axes=0)
        ctx.representation = r
        n_targets = ctx.target_x.shape[0]
        d = T.concat([T.repeat_rows(r, n_targets), Tensor(ctx.target_x)], axis=1)
        for i in range(len(self.dec_widths) - 1):
            d = self.act(_linear(d, self.params[f"dec_w{i}"], self.params[f"dec_b{i}"]))
        mu = _linear(d, self.params["mu_w"], self.params["mu_b"])
        log_sigma = _linear(d, self.params["ls_w"], self.params["ls_b"])
        output = ModelOutput(
            prediction=mu,
            prediction_rows=mu,
            basis=d,
            last_weights=self.params["mu_w"],
            head_bias=self.params["mu_b"],
            row_index=[(i, 0) for i in range(n_targets)],
        )
        return mu, log_sigma, output


def cnp_nll(mu: Tensor, log_sigma: Tensor, y) -> Tensor:
    """Mean Gaussian negative log-likelihood under a diagonal covariance."""
    y = T.as_tensor(y)
    if mu.shape != log_sigma.shape or mu.shape != y.shape:
        raise T.ShapeError(
            f"shape mismatch: mu {mu.shape}, log_sigma {log_sigma.shape}, y {y.shape}"
        )
    half_log_2pi = 0.5 * np.log(2.0 * np.pi)
    quad = T.mul(T.mul(T.square(T.sub(y, mu)), T.exp(T.mul(log_sigma, -2.0))), 0.5)
    return T.reduce_mean(T.add(T.add(quad, log_sigma), half_log_2pi))
