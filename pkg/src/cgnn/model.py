"""Temporal concept hypergraph network.

Each concept node and each hyperedge owns an LSTM whose input is produced by
a one-hidden-layer encoder over its own hidden state, the global state, the
frame embedding and an aggregated message from its neighbours. A global LSTM
summarises all nodes once per frame.

Per frame, :func:`graph_update` runs node aggregation, edge updates, edge
aggregation, node updates, the global update and finally the emission heads.

Message aggregation is ``sum_g c_g * mean_g @ W_g`` where the groups ``g``
depend on the directionality mode (one group, one per role, or one per
member) and ``c_g`` is the fraction of members in the group. Because the
first encoder layer is linear, tying every ``W_g`` recovers the undirected
encoder exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import ConceptGraphSpec, EmissionSpec, check_spec


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    lstm_input_dim: int = 64
    encoder_hidden: int = 64
    aggregation: str = "mean"
    precision: str = "f32"
    # False feeds the global encoder zeros instead of the node summary; with
    # no hyperedges this leaves every concept LSTM isolated from the others
    global_reads_nodes: bool = True

    @property
    def dtype(self):
        return ad.DTYPES[self.precision]


@dataclass(frozen=True)
class DropoutConfig:
    """Training-time drop rates for whole nodes, whole edges and one input modality."""

    node: float = 0.2
    edge: float = 0.2
    modality: float = 0.3


class LSTMCell:
    """Gate layout along the last axis of ``W``: input, forget, candidate, output."""

    def __init__(self, W: Tensor, b: Tensor, input_dim: int, hidden_dim: int):
        self.W, self.b = W, b
        self.input_dim, self.hidden_dim = input_dim, hidden_dim


class MessageEncoder:
    def __init__(self, ctx_W: Tensor, msg_W: dict[str, Tensor], b1: Tensor, W2: Tensor, b2: Tensor):
        self.ctx_W, self.msg_W, self.b1, self.W2, self.b2 = ctx_W, msg_W, b1, W2, b2

    @property
    def output_dim(self) -> int:
        return self.W2.shape[1]


class EmissionHead:
    def __init__(self, emission: EmissionSpec, W: Tensor, b: Tensor):
        self.emission, self.W, self.b = emission, W, b


@dataclass
class RecurrentState:
    nodes: dict[str, tuple[Tensor, Tensor]]
    edges: dict[str, tuple[Tensor, Tensor]]
    global_: tuple[Tensor, Tensor]
    t: int = 0

    def detach(self) -> "RecurrentState":
        """Cut the gradient path; used at truncation boundaries."""
        cut = lambda hc: (hc[0].detach(), hc[1].detach())  # noqa: E731
        return RecurrentState(
            {k: cut(v) for k, v in self.nodes.items()},
            {k: cut(v) for k, v in self.edges.items()},
            cut(self.global_),
            self.t,
        )

    @property
    def batch(self) -> int:
        return self.global_[0].shape[0]


class Model:
    """Parameters and wiring for one concept graph; see :func:`init_model`."""

    def __init__(self, spec: ConceptGraphSpec, config: ModelConfig):
        self.spec = spec
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.edge_groups: dict[str, dict[str, list[str]]] = {}
        self.node_groups: dict[str, dict[str, list[str]]] = {}
        self.node_cells: dict[str, LSTMCell] = {}
        self.node_encoders: dict[str, MessageEncoder] = {}
        self.edge_cells: dict[str, LSTMCell] = {}
        self.edge_encoders: dict[str, MessageEncoder] = {}
        self.heads: dict[str, EmissionHead] = {}
        self.head_owner: dict[str, tuple[str, str]] = {}

    @property
    def node_dim(self) -> int:
        return self.spec.nodes[0].state_dim

    @property
    def edge_dim(self) -> int:
        return self.spec.hyperedges[0].state_dim if self.spec.hyperedges else 0

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        missing = set(self.params) - set(arrays)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, t in self.params.items():
            if name not in arrays:
                continue
            arr = np.asarray(arrays[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def count_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _member_groups(spec: ConceptGraphSpec):
    mode = spec.directionality_mode
    edge_groups, node_groups = {}, {n.name: {} for n in spec.nodes}
    for e in spec.hyperedges:
        groups: dict[str, list[str]] = {}
        for node, role in e.members:
            key = "" if mode == "undirected-encoding" else role if mode == "directed-encoders" else node
            groups.setdefault(key, []).append(node)
            nkey = "" if mode == "undirected-encoding" else role if mode == "directed-encoders" else e.name
            node_groups[node].setdefault(nkey, []).append(e.name)
        edge_groups[e.name] = groups
    return edge_groups, node_groups


def init_model(spec: ConceptGraphSpec, config: ModelConfig | None = None, seed: int = 0) -> Model:
    """Build a model with weights drawn from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.

    Forget-gate biases start at 1 and the learned initial global state at 0.
    The inventory order depends only on the spec and config, so the same seed
    always yields bitwise-identical parameters.
    """
    check_spec(spec)
    config = config or ModelConfig()
    if config.aggregation not in ("mean", "sum"):
        raise ValueError(f"unknown aggregation {config.aggregation!r}")
    model = Model(spec, config)
    model.edge_groups, model.node_groups = _member_groups(spec)
    rng = np.random.default_rng(seed)
    dtype = config.dtype
    E, L, H = config.embed_dim, config.lstm_input_dim, config.encoder_hidden
    dn, du = spec.nodes[0].state_dim, spec.global_dim
    de = spec.hyperedges[0].state_dim if spec.hyperedges else 0

    def param(name, shape, fan_in, zero=False):
        bound = 1.0 / np.sqrt(fan_in)
        data = np.zeros(shape) if zero else rng.uniform(-bound, bound, size=shape)
        t = Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=True, name=name)
        model.params[name] = t
        return t

    def lstm(prefix, in_dim, hid):
        W = param(f"{prefix}.lstm.W", (in_dim + hid, 4 * hid), in_dim + hid)
        b = param(f"{prefix}.lstm.b", (1, 4 * hid), in_dim + hid)
        b.data[0, hid : 2 * hid] = 1.0
        return LSTMCell(W, b, in_dim, hid)

    def encoder(prefix, ctx_dim, groups, msg_dim):
        fan_in = ctx_dim + (msg_dim if groups else 0)
        ctx_W = param(f"{prefix}.enc.ctx_W", (ctx_dim, H), fan_in)
        msg_W = {g: param(f"{prefix}.enc.msg_W" + (f".{g}" if g else ""), (msg_dim, H), fan_in) for g in groups}
        b1 = param(f"{prefix}.enc.b1", (1, H), fan_in)
        W2 = param(f"{prefix}.enc.W2", (H, L), H)
        b2 = param(f"{prefix}.enc.b2", (1, L), H)
        return MessageEncoder(ctx_W, msg_W, b1, W2, b2)

    def head(owner_kind, owner, em, hid):
        W = param(f"{owner_kind}.{owner}.head.W", (hid, em.width), hid)
        b = param(f"{owner_kind}.{owner}.head.b", (1, em.width), hid)
        model.heads[owner] = EmissionHead(em, W, b)
        model.head_owner[owner] = (owner_kind, owner)

    model.frame_W = param("frame.W", (spec.input_dim, E), spec.input_dim)
    model.frame_b = param("frame.b", (1, E), spec.input_dim)
    model.global_h0 = param("global.h0", (1, du), du, zero=True)
    model.global_encoder = encoder("global", dn + E, {}, 0)
    model.global_cell = lstm("global", L, du)
    for e in spec.hyperedges:
        model.edge_encoders[e.name] = encoder(f"edge.{e.name}", de + du + E, model.edge_groups[e.name], dn)
        model.edge_cells[e.name] = lstm(f"edge.{e.name}", L, de)
        if e.emission:
            head("edge", e.name, e.emission, de)
    for n in spec.nodes:
        model.node_encoders[n.name] = encoder(f"node.{n.name}", dn + du + E, model.node_groups[n.name], de)
        model.node_cells[n.name] = lstm(f"node.{n.name}", L, dn)
        if n.emission:
            head("node", n.name, n.emission, dn)
    return model


def ablate_message_passing(spec: ConceptGraphSpec, config: ModelConfig | None = None):
    """Spec and config for the baseline with no information flow between concepts.

    All hyperedges go, and the global state stops reading node states. Each
    concept keeps its own LSTM over the frame embedding and global context.
    """
    return spec.without_edges(), replace(config or ModelConfig(), global_reads_nodes=False)


def clone_model(model: Model, spec: ConceptGraphSpec | None = None) -> Model:
    """Fresh model with copied parameters (optionally under a compatible spec)."""
    other = init_model(spec or model.spec, model.config, seed=0)
    other.load_arrays(model.param_arrays(), strict=spec is None)
    return other


def with_precision(model: Model, precision: str) -> Model:
    other = init_model(model.spec, replace(model.config, precision=precision), seed=0)
    other.load_arrays(model.param_arrays())
    return other


# --------------------------------------------------------------------------
# building blocks


def _ones(batch: int, dtype) -> Tensor:
    return Tensor(np.ones((batch, 1), dtype=dtype))


def _linear(x: Tensor, W: Tensor, b: Tensor, ones: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, W), ad.matmul(ones, b))


def lstm_step(cell: LSTMCell, h: Tensor, c: Tensor, x: Tensor) -> tuple[Tensor, Tensor]:
    hid = cell.hidden_dim
    if x.shape[-1] != cell.input_dim or h.shape[-1] != hid or c.shape[-1] != hid:
        raise ad.ShapeError(
            f"lstm_step: expected x[..,{cell.input_dim}], h/c[..,{hid}]; got {x.shape}, {h.shape}, {c.shape}"
        )
    ones = _ones(x.shape[0], x.dtype)
    z = _linear(ad.concat([x, h]), cell.W, cell.b, ones)
    i = ad.sigmoid(ad.slice_last(z, 0, hid))
    f = ad.sigmoid(ad.slice_last(z, hid, 2 * hid))
    g = ad.tanh(ad.slice_last(z, 2 * hid, 3 * hid))
    o = ad.sigmoid(ad.slice_last(z, 3 * hid, 4 * hid))
    c_new = ad.add(ad.hadamard(f, c), ad.hadamard(i, g))
    h_new = ad.hadamard(o, ad.tanh(c_new))
    return h_new, c_new


def _mean(tensors: list[Tensor], how: str = "mean") -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    if how == "mean" and len(tensors) > 1:
        total = ad.scale(total, 1.0 / len(tensors))
    return total


def aggregate_nodes_for_edge(states: list[Tensor], how: str = "mean") -> Tensor:
    """Element-wise mean (or sum) of member node states."""
    if not states:
        raise ValueError("aggregate_nodes_for_edge: no member states")
    return _mean(list(states), how)


def aggregate_edges_for_node(states: list[Tensor], dim: int, batch: int = 1, how: str = "mean", dtype=np.float64) -> Tensor:
    """Element-wise mean (or sum) of incident edge states; zeros for isolated nodes."""
    if not states:
        return Tensor(np.zeros((batch, dim), dtype=dtype))
    return _mean(list(states), how)


def encode_frame(model: Model, features) -> Tensor:
    x = features if isinstance(features, Tensor) else Tensor(np.atleast_2d(np.asarray(features, dtype=model.config.dtype)))
    if x.shape[-1] != model.spec.input_dim:
        raise ad.ShapeError(f"encode_frame: expected {model.spec.input_dim} features, got {x.shape[-1]}")
    return ad.tanh(_linear(x, model.frame_W, model.frame_b, _ones(x.shape[0], x.dtype)))


def emit(head: EmissionHead, hidden: Tensor) -> Tensor:
    logits = _linear(hidden, head.W, head.b, _ones(hidden.shape[0], hidden.dtype))
    if head.emission.kind == "categorical":
        return ad.softmax(logits)
    return ad.sigmoid(logits)


def _encode(enc: MessageEncoder, ctx: Tensor, msg: Tensor | None, ones: Tensor) -> Tensor:
    pre = _linear(ctx, enc.ctx_W, enc.b1, ones)
    if msg is not None:
        pre = ad.add(pre, msg)
    return _linear(ad.tanh(pre), enc.W2, enc.b2, ones)


def _message(enc: MessageEncoder, groups: dict[str, list[Tensor]], how: str) -> Tensor | None:
    """``sum_g c_g * agg(group g) @ W_g`` with ``c_g`` the group's share of members."""
    total_members = sum(len(v) for v in groups.values())
    if total_members == 0:
        return None
    msg = None
    for key, states in groups.items():
        agg = _mean(states, how)
        term = ad.matmul(agg, enc.msg_W[key])
        if how == "mean" and len(groups) > 1:
            term = ad.scale(term, len(states) / total_members)
        msg = term if msg is None else ad.add(msg, term)
    return msg


@dataclass
class FrameMasks:
    """Per-frame dropout multipliers; ``None`` entries mean no dropout."""

    nodes: dict[str, Tensor] = field(default_factory=dict)
    edges: dict[str, Tensor] = field(default_factory=dict)
    embed: Tensor | None = None
    message: Tensor | None = None


def sample_masks(model: Model, batch: int, rng: np.random.Generator | None, rates: DropoutConfig | None = None) -> FrameMasks:
    """Inverted-dropout masks for whole nodes, whole edges and one modality."""
    masks = FrameMasks()
    if rng is None:
        return masks
    rates = rates or DropoutConfig()
    cfg, dtype = model.config, model.config.dtype

    def drop(p, dim):
        keep = (rng.random((batch, 1)) >= p).astype(dtype) / dtype(1.0 - p)
        return Tensor(np.repeat(keep, dim, axis=1))

    if rates.node > 0:
        masks.nodes = {n.name: drop(rates.node, model.node_dim) for n in model.spec.nodes}
    if rates.edge > 0 and model.spec.hyperedges:
        masks.edges = {e.name: drop(rates.edge, model.edge_dim) for e in model.spec.hyperedges}
    if rates.modality > 0:
        hit = rng.random(batch) < rates.modality
        which = rng.random(batch) < 0.5
        keep_scale = 1.0 / (1.0 - rates.modality / 2)
        emb = np.where(hit & which, 0.0, keep_scale).astype(dtype)[:, None]
        msg = np.where(hit & ~which, 0.0, keep_scale).astype(dtype)[:, None]
        masks.embed = Tensor(np.repeat(emb, cfg.embed_dim, axis=1))
        masks.message = Tensor(np.repeat(msg, cfg.encoder_hidden, axis=1))
    return masks


def _masked(t: Tensor, mask: Tensor | None) -> Tensor:
    return t if mask is None else ad.hadamard(t, mask)


def edge_update(model: Model, edge: str, member_states: dict[str, Tensor], u: Tensor, emb: Tensor, state: RecurrentState, masks: FrameMasks | None = None):
    """Advance one hyperedge LSTM given (already dropout-masked) member node states."""
    masks = masks or FrameMasks()
    h, c = state.edges[edge]
    enc = model.edge_encoders[edge]
    groups = {g: [member_states[n] for n in names] for g, names in model.edge_groups[edge].items()}
    msg = _masked(_message(enc, groups, model.config.aggregation), masks.message)
    ones = _ones(h.shape[0], h.dtype)
    x = _encode(enc, ad.concat([h, u, _masked(emb, masks.embed)]), msg, ones)
    return lstm_step(model.edge_cells[edge], h, c, x)


def node_update(model: Model, node: str, edge_states: dict[str, Tensor], u: Tensor, emb: Tensor, state: RecurrentState, masks: FrameMasks | None = None):
    """Advance one concept LSTM given (already dropout-masked) updated edge states."""
    masks = masks or FrameMasks()
    h, c = state.nodes[node]
    enc = model.node_encoders[node]
    groups = {g: [edge_states[e] for e in names] for g, names in model.node_groups[node].items()}
    msg = _message(enc, groups, model.config.aggregation)
    if msg is not None:
        msg = _masked(_masked(msg, masks.message), _node_msg_mask(masks, node, msg.shape[-1]))
    ones = _ones(h.shape[0], h.dtype)
    x = _encode(enc, ad.concat([h, u, _masked(emb, masks.embed)]), msg, ones)
    return lstm_step(model.node_cells[node], h, c, x)


def _node_msg_mask(masks: FrameMasks, node: str, width: int) -> Tensor | None:
    m = masks.nodes.get(node)
    if m is None:
        return None
    # dropped nodes also receive nothing this frame
    col = (m.data[:, :1] > 0).astype(m.dtype)
    return Tensor(np.repeat(col, width, axis=1))


def initial_state(model: Model, batch: int = 1) -> RecurrentState:
    dtype = model.config.dtype
    zeros = lambda d: Tensor(np.zeros((batch, d), dtype=dtype))  # noqa: E731
    nodes = {n.name: (zeros(n.state_dim), zeros(n.state_dim)) for n in model.spec.nodes}
    edges = {e.name: (zeros(e.state_dim), zeros(e.state_dim)) for e in model.spec.hyperedges}
    h0 = ad.matmul(_ones(batch, dtype), model.global_h0)
    return RecurrentState(nodes, edges, (h0, zeros(model.spec.global_dim)), 0)


def graph_update(
    model: Model,
    state: RecurrentState,
    frame,
    rng: np.random.Generator | None = None,
    dropout: DropoutConfig | None = None,
):
    """One frame of message passing. Returns ``(new_state, emissions)``.

    Dropout masks are drawn from ``rng``; pass ``None`` for the deterministic
    evaluation path.
    """
    x = frame if isinstance(frame, Tensor) else Tensor(np.atleast_2d(np.asarray(frame, dtype=model.config.dtype)))
    if x.shape[-1] != model.spec.input_dim:
        raise ad.ShapeError(f"graph_update: expected {model.spec.input_dim} features, got {x.shape[-1]}")
    if x.shape[0] != state.batch:
        raise ad.ShapeError(f"graph_update: batch {x.shape[0]} != state batch {state.batch}")
    how = model.config.aggregation
    masks = sample_masks(model, state.batch, rng, dropout)
    emb = encode_frame(model, x)
    u = state.global_[0]

    sent_nodes = {n: _masked(hc[0], masks.nodes.get(n)) for n, hc in state.nodes.items()}
    new_edges = {
        e.name: edge_update(model, e.name, sent_nodes, u, emb, state, masks) for e in model.spec.hyperedges
    }
    sent_edges = {k: _masked(hc[0], masks.edges.get(k)) for k, hc in new_edges.items()}
    new_nodes = {n.name: node_update(model, n.name, sent_edges, u, emb, state, masks) for n in model.spec.nodes}

    ones = _ones(state.batch, x.dtype)
    if model.config.global_reads_nodes:
        node_mean = _mean([_masked(hc[0], masks.nodes.get(n)) for n, hc in new_nodes.items()], how)
    else:
        node_mean = Tensor(np.zeros((state.batch, model.node_dim), dtype=x.dtype))
    g_in = _encode(model.global_encoder, ad.concat([node_mean, emb]), None, ones)
    new_global = lstm_step(model.global_cell, state.global_[0], state.global_[1], g_in)

    emissions = {}
    for name, head in model.heads.items():
        kind, owner = model.head_owner[name]
        hidden = new_nodes[owner][0] if kind == "node" else new_edges[owner][0]
        emissions[name] = emit(head, hidden)
    return RecurrentState(new_nodes, new_edges, new_global, state.t + 1), emissions


def forward_sequence(
    model: Model,
    frames,
    state: RecurrentState | None = None,
    rng: np.random.Generator | None = None,
    dropout: DropoutConfig | None = None,
):
    """Run ``graph_update`` over ``frames`` shaped ``(T, D)`` or ``(T, B, D)``.

    Returns ``(emissions_per_frame, final_state)``. Starts from a fresh state
    unless one is passed in.
    """
    frames = np.asarray(frames, dtype=model.config.dtype)
    if frames.ndim == 2:
        frames = frames[:, None, :]
    if frames.shape[0] == 0:
        raise ValueError("forward_sequence: empty sequence")
    if state is None:
        state = initial_state(model, frames.shape[1])
    out = []
    for frame in frames:
        state, em = graph_update(model, state, frame, rng, dropout)
        out.append(em)
    return out, state


def emissions_to_numpy(per_frame: list[dict[str, Tensor]]) -> dict[str, np.ndarray]:
    """Stack per-frame emissions into ``{concept: array (T, B, width)}``."""
    names = per_frame[0].keys()
    return {n: np.stack([em[n].data for em in per_frame]) for n in names}
