"""Tensorial message passing in local frames.

Node features live in each node's local frame. A message from node j to
node i is first transported into the frame of i (exact representation,
learned MLP, or nothing for scalar messages), then combined with embeddings
of the local edge vector ``F_i (x_i - x_j)``. Everything downstream of the
canonicalization is therefore invariant to global rotations and
translations; vector and tensor outputs are rotated back per node before
pooling.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .embeddings import BesselConfig, angular_embed, init_bessel, radial_embed
from .errors import ConfigError, ShapeMismatch
from .frames import LocalFrames, compute_frames, edge_transitions, init_frame_weights
from .group import random_rotation_matrices
from .reps import Parity, RepAction, RepBlock, RepKind, RepSpec, as_repspec, init_mlp_rep, irreps_of, mlp_rep_apply, parse_repspec

# ---------------------------------------------------------------------------
# graphs
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """A batch of molecules.

    ``edge_index[0]`` holds sources (j), ``edge_index[1]`` destinations (i);
    edges are sorted by ``(dst, src)``.
    """

    positions: np.ndarray
    node_features: np.ndarray
    edge_index: np.ndarray
    batch_ids: np.ndarray
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return self.positions.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edge_index.shape[1]


def radius_graph(positions: np.ndarray, batch_ids: np.ndarray, cutoff: float) -> np.ndarray:
    """All ordered pairs in the same molecule with ``0 < distance <= cutoff``.

    Returns ``edge_index`` of shape ``(2, E)``, sorted by ``(dst, src)``.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    batch_ids = np.asarray(batch_ids)
    srcs, dsts = [], []
    for b in np.unique(batch_ids):
        idx = np.flatnonzero(batch_ids == b)
        p = positions[idx]
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        s, t = np.nonzero((d <= cutoff) & (d > 0))
        srcs.append(idx[s])
        dsts.append(idx[t])
    if not srcs:
        return np.zeros((2, 0), dtype=np.int64)
    src = np.concatenate(srcs)
    dst = np.concatenate(dsts)
    order = np.lexsort((src, dst))
    return np.stack([src[order], dst[order]]).astype(np.int64)


def make_graph(positions, node_features, cutoff: float, batch_ids=None) -> Graph:
    positions = np.asarray(positions, dtype=np.float64)
    if batch_ids is None:
        batch_ids = np.zeros(positions.shape[0], dtype=np.int64)
    batch_ids = np.asarray(batch_ids, dtype=np.int64)
    feats = np.asarray(node_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    edges = radius_graph(positions, batch_ids, cutoff)
    num_graphs = int(batch_ids.max()) + 1 if batch_ids.size else 0
    return Graph(positions, feats, edges, batch_ids, num_graphs)


# ---------------------------------------------------------------------------
# message modes and transport
# ---------------------------------------------------------------------------


class ModeKind(str, enum.Enum):
    SCALAR = "scalar"
    CARTESIAN = "cartesian"
    IRREP = "irrep"
    MLP = "mlp"


@dataclass(frozen=True)
class MessageMode:
    kind: ModeKind
    rep: RepSpec

    @classmethod
    def build(cls, kind: str, rep: str | RepSpec, irreps: str | None = None) -> "MessageMode":
        """Feature layout for a mode; ``rep`` is in Cartesian notation.

        Irrep mode uses the irreducible decomposition of ``rep`` unless
        ``irreps`` is given. Scalar and MLP modes keep only its dimension.
        """
        kind = ModeKind(kind)
        cart = as_repspec(rep, RepKind.CARTESIAN)
        if kind is ModeKind.CARTESIAN:
            return cls(kind, cart)
        if kind is ModeKind.IRREP:
            return cls(kind, parse_repspec(irreps, RepKind.IRREP) if irreps else irreps_of(cart))
        scal = RepSpec((RepBlock(cart.total_dim, 0, Parity.NORMAL, RepKind.CARTESIAN),), RepKind.CARTESIAN)
        return cls(kind, scal)

    @property
    def dim(self) -> int:
        return self.rep.total_dim


@dataclass
class EdgeContext:
    """Per-forward geometric quantities shared by every layer."""

    graph: Graph
    frames: LocalFrames
    src: np.ndarray
    dst: np.ndarray
    lengths: np.ndarray
    local_dirs: np.ndarray
    transitions: np.ndarray
    has_incoming: np.ndarray
    _actions: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    def action(self, spec: RepSpec) -> RepAction:
        key = str(spec) + spec.kind.value
        if key not in self._actions:
            self._actions[key] = RepAction(spec, self.transitions, np.ones(len(self.src)))
        return self._actions[key]


def build_context(graph: Graph, frames: LocalFrames) -> EdgeContext:
    src, dst = graph.edge_index
    rel = graph.positions[dst] - graph.positions[src]
    lengths = np.linalg.norm(rel, axis=1)
    # local coordinates of the unit vector x_i - x_j in the frame of i
    local = np.einsum("eab,eb->ea", frames.matrices[dst], rel / lengths[:, None])
    local /= np.linalg.norm(local, axis=1, keepdims=True)
    trans = edge_transitions(frames, graph.edge_index)
    has_in = np.bincount(dst, minlength=graph.num_nodes) > 0
    return EdgeContext(graph, frames, src, dst, lengths, local, trans, has_in)


def transport(params: nn.ParamStore, name: str, mode: MessageMode, ctx: EdgeContext, x_src: nn.Tensor) -> nn.Tensor:
    """Carry source-node features into the receiver's frame: ``rho(F_i F_j^T) f_j``."""
    if mode.kind is ModeKind.SCALAR:
        return x_src
    if mode.kind is ModeKind.MLP:
        return mlp_rep_apply(params, ctx.transitions, x_src, name=f"{name}.mlp_rep")
    act = ctx.action(mode.rep)
    return nn.linear_map(x_src, act.apply, act.apply_inverse)


# ---------------------------------------------------------------------------
# frame-aware message passing wrapper
# ---------------------------------------------------------------------------


class FrameMessagePassing:
    """Wraps a plain message function so its arguments arrive in the receiver's frame.

    ``params_dict`` declares each argument as ``{"type": "local" | "global",
    "rep": spec}``. Local arguments are already in node frames; their source
    copy ``<name>_j`` is transported from the frame of j into the frame of i.
    Global arguments are given in global coordinates; both ``<name>_i`` and
    ``<name>_j`` are expressed in the frame of i. Positions are global
    vectors: ``{"type": "global", "rep": "1x1n"}``.
    """

    def __init__(self, params_dict: dict, message: Callable[..., nn.Tensor], aggr: str = "sum"):
        self.args = {}
        for key, d in params_dict.items():
            if d["type"] not in ("local", "global"):
                raise ConfigError(f"params_dict.{key}.type", "must be 'local' or 'global'")
            self.args[key] = (d["type"], as_repspec(d["rep"]))
        if aggr not in ("sum", "mean"):
            raise ConfigError("aggr", "must be 'sum' or 'mean'")
        self.message = message
        self.aggr = aggr

    def propagate(self, ctx: EdgeContext, **inputs) -> nn.Tensor:
        kwargs = {}
        for key, (kind, spec) in self.args.items():
            x = nn.as_tensor(inputs[key])
            if x.shape[-1] != spec.total_dim:
                raise ShapeMismatch(f"{key}: width {x.shape[-1]} != {spec.total_dim}")
            xi = nn.gather(x, ctx.dst)
            xj = nn.gather(x, ctx.src)
            if kind == "local":
                act = ctx.action(spec)
                kwargs[f"{key}_j"] = nn.linear_map(xj, act.apply, act.apply_inverse)
                kwargs[f"{key}_i"] = xi
            else:
                act = RepAction(spec, ctx.frames.matrices[ctx.dst], np.ones(len(ctx.dst)))
                kwargs[f"{key}_i"] = nn.linear_map(xi, act.apply, act.apply_inverse)
                kwargs[f"{key}_j"] = nn.linear_map(xj, act.apply, act.apply_inverse)
        msg = self.message(**kwargs)
        out = nn.segment_sum(msg, ctx.dst, ctx.num_nodes)
        if self.aggr == "mean":
            counts = np.maximum(np.bincount(ctx.dst, minlength=ctx.num_nodes), 1)
            out = out * (1.0 / counts)[:, None].astype(out.dtype)
        return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

TARGET_DIMS = {"scalar": 1, "vector": 3, "tensor": 9}
_TARGET_REPS = {"vector": "1x1n", "tensor": "1x2n"}


@dataclass
class ModelConfig:
    mode: str = "cartesian"
    rep: str = "94x0n+32x1n+16x2n"
    irreps: str | None = None
    input_rep: str = "1x0n"
    target: str = "scalar"
    num_layers: int = 5
    num_heads: int = 4
    attn_dim: int = 48
    value_dim: int = 96
    mlp_hidden: int = 512
    gate_hidden: int = 64
    mlp_rep_hidden: list = field(default_factory=lambda: [64])
    head_hidden: list = field(default_factory=lambda: [512, 128, 32])
    num_radial: int = 32
    num_angular: int = 20
    cutoff: float = 5.0
    envelope_degree: int = 6
    attn_dropout: float = 0.1
    stochastic_depth: float = 0.05
    frames: str = "predicted"
    frame_weights: str = "heuristic"
    dtype: str = "float64"

    @classmethod
    def from_dict(cls, d: dict, path: str = "model") -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(f"{path}.{k}", "unknown field")
        cfg = cls(**d)
        cfg.validate(path)
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self, path: str = "model"):
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{path}.{key}", msg)

        need(self.mode in {m.value for m in ModeKind}, "mode", f"unknown mode {self.mode!r}")
        try:
            as_repspec(self.rep, RepKind.CARTESIAN)
            as_repspec(self.input_rep, RepKind.CARTESIAN)
            if self.irreps:
                parse_repspec(self.irreps, RepKind.IRREP)
        except ValueError as exc:
            raise ConfigError(f"{path}.rep", str(exc)) from None
        need(self.target in TARGET_DIMS, "target", "must be scalar, vector or tensor")
        need(isinstance(self.num_layers, int) and self.num_layers >= 0, "num_layers", "must be a non-negative integer")
        need(self.num_heads >= 1, "num_heads", "must be >= 1")
        need(self.attn_dim % self.num_heads == 0, "attn_dim", "must be divisible by num_heads")
        need(self.value_dim % self.num_heads == 0, "value_dim", "must be divisible by num_heads")
        need(self.cutoff > 0, "cutoff", "must be positive")
        need(self.num_radial >= 1, "num_radial", "must be >= 1")
        need(self.num_angular >= 1, "num_angular", "must be >= 1")
        need(0 <= self.attn_dropout < 1, "attn_dropout", "must be in [0, 1)")
        need(0 <= self.stochastic_depth < 1, "stochastic_depth", "must be in [0, 1)")
        need(self.frames in ("predicted", "random_shared"), "frames", "must be 'predicted' or 'random_shared'")
        need(self.frame_weights in ("heuristic", "learned"), "frame_weights", "must be 'heuristic' or 'learned'")
        need(self.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")

    @property
    def bessel(self) -> BesselConfig:
        return BesselConfig(self.num_radial, self.num_angular, self.cutoff, self.envelope_degree)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def init_edge_layer(params, name, d_in, d_out, edge_dim, gate_hidden, rng):
    nn.init_linear(params, f"{name}.B", d_in, d_out, rng)
    nn.init_mlp(params, f"{name}.gate", [edge_dim, gate_hidden, d_out], rng)
    nn.init_linear(params, f"{name}.A", d_out, d_out, rng)


def edge_message(params: nn.ParamStore, name: str, transported: nn.Tensor, edge_emb: nn.Tensor) -> nn.Tensor:
    """``A(B t ⊙ MLP(edge_emb))`` for already-transported features ``t``."""
    gated = nn.linear(params, f"{name}.B", transported) * nn.mlp(params, f"{name}.gate", edge_emb)
    return nn.linear(params, f"{name}.A", gated)


def edge_embedding(params: nn.ParamStore, cfg: BesselConfig, ctx: EdgeContext, dtype=np.float64) -> nn.Tensor:
    """``R(r_ij) || Theta(F_i r̂_ij)`` for every edge."""
    rad = radial_embed(cfg, ctx.lengths.astype(dtype), params["embed.radial_freq"])
    ang = angular_embed(cfg, ctx.local_dirs.astype(dtype), params["embed.angular_freq"])
    return nn.concat([rad, ang], axis=-1)


def edge_layer(params, name, mode: MessageMode, ctx: EdgeContext, features: nn.Tensor, edge_emb: nn.Tensor) -> nn.Tensor:
    """EDGE message for every edge ``j -> i`` from node features ``f`` (local frames)."""
    features = nn.as_tensor(features)
    if features.shape[-1] != mode.dim:
        raise ShapeMismatch(f"features width {features.shape[-1]} != {mode.dim}")
    t = transport(params, name, mode, ctx, nn.gather(features, ctx.src))
    return edge_message(params, name, t, edge_emb)


def init_attention(params, name, mode: MessageMode, cfg: ModelConfig, rng):
    d = mode.dim
    edge_dim = cfg.num_radial + 3 * cfg.num_angular
    nn.init_linear(params, f"{name}.q", d, cfg.attn_dim, rng)
    nn.init_linear(params, f"{name}.k", d, cfg.attn_dim, rng)
    nn.init_mlp(params, f"{name}.logits", [edge_dim + cfg.num_heads, cfg.attn_dim, cfg.num_heads], rng)
    init_edge_layer(params, f"{name}.value", d, cfg.value_dim, edge_dim, cfg.gate_hidden, rng)
    nn.init_linear(params, f"{name}.out", cfg.value_dim, d, rng)
    if mode.kind is ModeKind.MLP:
        init_mlp_rep(params, f"{name}.mlp_rep", d, tuple(cfg.mlp_rep_hidden), rng)


def attention_block(
    params: nn.ParamStore,
    name: str,
    mode: MessageMode,
    ctx: EdgeContext,
    features: nn.Tensor,
    edge_emb: nn.Tensor,
    num_heads: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Multi-head attention over incoming edges with EDGE values.

    Logits come from an MLP on invariant edge descriptors: the edge
    embedding and, per head, the inner product between a query of the
    receiver and a key of the transported sender features. Nodes without
    incoming edges get a zero update.
    """
    n = ctx.num_nodes
    e = len(ctx.src)
    t = transport(params, name, mode, ctx, nn.gather(features, ctx.src))
    q = nn.gather(nn.linear(params, f"{name}.q", features), ctx.dst)
    k = nn.linear(params, f"{name}.k", t)
    head_dim = q.shape[-1] // num_heads
    dots = nn.tsum(nn.reshape(q * k, (e, num_heads, head_dim)), axis=-1) * (1.0 / np.sqrt(head_dim))
    logits = nn.mlp(params, f"{name}.logits", nn.concat([edge_emb, dots], axis=-1))
    alpha = nn.segment_softmax(logits, ctx.dst, n)
    weights = alpha
    if dropout > 0 and rng is not None:
        keep = (rng.random(alpha.shape) >= dropout).astype(alpha.dtype) / (1.0 - dropout)
        alpha = alpha * keep
    values = edge_message(params, f"{name}.value", t, edge_emb)
    vdim = values.shape[-1] // num_heads
    weighted = nn.reshape(values, (e, num_heads, vdim)) * nn.reshape(alpha, (e, num_heads, 1))
    agg = nn.segment_sum(nn.reshape(weighted, (e, num_heads * vdim)), ctx.dst, n)
    out = nn.linear(params, f"{name}.out", agg) * ctx.has_incoming[:, None].astype(agg.dtype)
    return (out, weights) if return_weights else out


def init_locaformer_layer(params, name, mode, cfg: ModelConfig, rng):
    d = mode.dim
    nn.init_layernorm(params, f"{name}.ln_attn", d)
    init_attention(params, f"{name}.attn", mode, cfg, rng)
    nn.init_layernorm(params, f"{name}.ln_mlp", d)
    nn.init_mlp(params, f"{name}.mlp", [d, cfg.mlp_hidden, d], rng)


def _drop_path(branch: nn.Tensor, rate: float, batch_ids: np.ndarray, num_graphs: int, rng) -> nn.Tensor:
    if rate <= 0 or rng is None:
        return branch
    keep = (rng.random(num_graphs) >= rate).astype(branch.dtype) / (1.0 - rate)
    return branch * keep[batch_ids][:, None]


def locaformer_layer(params, name, mode, ctx, x, edge_emb, cfg: ModelConfig, training=False, rng=None):
    """Pre-norm residual layer: attention block, then a per-node MLP."""
    g = ctx.graph
    drop = cfg.attn_dropout if training else 0.0
    depth = cfg.stochastic_depth if training else 0.0
    h = attention_block(params, f"{name}.attn", mode, ctx, nn.layernorm(params, f"{name}.ln_attn", x), edge_emb, cfg.num_heads, drop, rng)
    x = x + _drop_path(h, depth, g.batch_ids, g.num_graphs, rng)
    h = nn.mlp(params, f"{name}.mlp", nn.layernorm(params, f"{name}.ln_mlp", x))
    return x + _drop_path(h, depth, g.batch_ids, g.num_graphs, rng)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    config: ModelConfig
    mode: MessageMode
    params: nn.ParamStore
    input_spec: RepSpec

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def output_dim(self) -> int:
        return TARGET_DIMS[self.config.target]


def build_model(config: ModelConfig | dict, seed: int = 0) -> Model:
    cfg = config if isinstance(config, ModelConfig) else ModelConfig.from_dict(config)
    cfg.validate()
    rng = np.random.default_rng(seed)
    mode = MessageMode.build(cfg.mode, cfg.rep, cfg.irreps)
    params = nn.ParamStore(np.float64)
    input_spec = as_repspec(cfg.input_rep, RepKind.CARTESIAN)
    init_bessel(params, cfg.bessel, "embed")
    if cfg.frame_weights == "learned":
        init_frame_weights(params, cfg.bessel, rng)
        for k in params.names():
            if k.startswith("frames."):
                params._entries[k].learnable = False
                params[k].requires_grad = False
    nn.init_linear(params, "input", input_spec.total_dim, mode.dim, rng)
    for k in range(cfg.num_layers):
        init_locaformer_layer(params, f"layer{k}", mode, cfg, rng)
    nn.init_layernorm(params, "ln_out", mode.dim)
    nn.init_mlp(params, "head", [mode.dim, *cfg.head_hidden, TARGET_DIMS[cfg.target]], rng)
    if cfg.dtype == "float32":
        params = _cast(params, np.float32)
    return Model(cfg, mode, params, input_spec)


def _cast(params: nn.ParamStore, dtype) -> nn.ParamStore:
    out = nn.ParamStore(dtype)
    for k in params.names():
        out.add(k, params.values(k), params.is_learnable(k))
    return out


def predict_frames(model: Model, graph: Graph, rng: np.random.Generator | None = None) -> LocalFrames:
    """Frames used by the model: predicted, or one random frame shared per molecule."""
    if model.config.frames == "random_shared":
        rng = rng if rng is not None else np.random.default_rng()
        per_graph = random_rotation_matrices(rng, graph.num_graphs)
        return LocalFrames(per_graph[graph.batch_ids], np.zeros(graph.num_nodes, dtype=bool))
    wp = model.params if model.config.frame_weights == "learned" else None
    return compute_frames(graph.positions, graph.edge_index, wp, model.config.bessel)


def forward(
    model: Model,
    graph: Graph,
    frames: LocalFrames | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_nodes: bool = False,
):
    """Per-molecule predictions: ``(G, 1)``, ``(G, 3)`` or ``(G, 9)`` (row-major 3x3).

    Dropout and stochastic depth are active only when ``training`` is set
    and an ``rng`` is given.
    """
    cfg = model.config
    params = model.params
    dtype = model.dtype
    if graph.node_features.shape[1] != model.input_spec.total_dim:
        raise ShapeMismatch(f"node features width {graph.node_features.shape[1]} != input rep {model.input_spec}")
    if frames is None:
        frames = predict_frames(model, graph, rng)
    ctx = build_context(graph, frames)
    local_in = RepAction(model.input_spec, frames.matrices, np.ones(graph.num_nodes)).apply(graph.node_features)
    x = nn.linear(params, "input", nn.Tensor(local_in.astype(dtype)))
    edge_emb = edge_embedding(params, cfg.bessel, ctx, dtype) if cfg.num_layers else None
    for k in range(cfg.num_layers):
        x = locaformer_layer(params, f"layer{k}", model.mode, ctx, x, edge_emb, cfg, training, rng)
    node_out = nn.mlp(params, "head", nn.layernorm(params, "ln_out", x))
    if cfg.target != "scalar":
        spec = parse_repspec(_TARGET_REPS[cfg.target])
        act = RepAction(spec, frames.matrices, np.ones(graph.num_nodes))
        node_out = nn.linear_map(node_out, act.apply_inverse, act.apply)
        if cfg.target == "tensor":
            node_out = symmetrize(node_out)
    pooled = nn.segment_sum(node_out, graph.batch_ids, graph.num_graphs)
    return (pooled, node_out) if return_nodes else pooled


_T_PERM = np.arange(9).reshape(3, 3).T.ravel()


def symmetrize(flat: nn.Tensor) -> nn.Tensor:
    """``(T + T^T) / 2`` for row-major flattened 3x3 tensors."""
    return (flat + flat[:, _T_PERM]) * 0.5


def transform_outputs(target: str, y: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """How per-molecule outputs ``(G, k)`` change when the input is rotated by ``rot``."""
    if target == "scalar":
        return y
    if target == "vector":
        return y @ rot.T
    t = y.reshape(-1, 3, 3)
    return (rot @ t @ rot.T).reshape(-1, 9)


def equivariance_error(model: Model, positions: np.ndarray, node_features: np.ndarray, rotations: np.ndarray, translations: np.ndarray) -> tuple[float, bool]:
    """Max deviation of one molecule's output from exact O(3)-covariance under ``x -> Qx + t``.

    Errors are relative to ``max(1, |f(x)|_inf)``. Returns ``(error, degenerate)``
    where ``degenerate`` flags molecules with a fallback frame (no guarantee there).
    """
    positions = np.asarray(positions, dtype=np.float64)
    node_features = np.asarray(node_features, dtype=np.float64)
    n, k = len(positions), len(rotations)
    # the untransformed copy and every transformed copy go through one batched forward
    pos = np.concatenate([positions] + [positions @ rot.T + shift for rot, shift in zip(rotations, translations)])
    feats = np.concatenate([node_features] + [RepAction(model.input_spec, rot[None], np.ones(1)).apply(node_features) for rot in rotations])
    g = make_graph(pos, feats, model.config.cutoff, np.repeat(np.arange(k + 1), n))
    frames = predict_frames(model, g)
    out = forward(model, g, frames).data.astype(np.float64)
    base = out[:1]
    scale = max(1.0, float(np.max(np.abs(base))))
    worst = 0.0
    for rot, y in zip(rotations, out[1:]):
        worst = max(worst, float(np.max(np.abs(y[None] - transform_outputs(model.config.target, base, rot)))) / scale)
    return worst, bool(frames.degenerate_mask[:n].any())
