"""Progressive relational GNN with gated fusion units and buffer layers.

The encoder works on a batch of queries at once: every (query, entity) pair
reached so far is a *node*, nodes are kept sorted by (query, entity), and
the active edges of a layer are the augmented triples leaving the previous
layer's nodes. Messages depend only on (source node, relation), so they are
computed once per distinct pair and shared by all edges of that pair.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .kg import KnowledgeGraph, _csr_edge_ids
from .numerics import Parameter, Tensor

MESSAGE_KINDS = ("qrfgu", "add", "mul")


@dataclass(frozen=True)
class EncoderConfig:
    n: int = 5  # exploration layers
    m: int = 2  # buffer layers
    d: int = 64
    d_a: int | None = None  # attention dimension, defaults to d
    phi: str = "relu"
    message: str = "qrfgu"  # message function: qrfgu | add | mul

    def __post_init__(self):
        if self.d_a is None:
            object.__setattr__(self, "d_a", self.d)
        if self.n < 1 or self.m < 0 or self.d < 1 or self.d_a < 1:
            raise ValueError(f"invalid encoder sizes n={self.n} m={self.m} d={self.d} d_a={self.d_a}")
        if self.phi not in nx.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.phi!r}")
        if self.message not in MESSAGE_KINDS:
            raise ValueError(f"unknown message function {self.message!r}")

    @property
    def num_layers(self) -> int:
        return self.n + self.m

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "d": self.d, "d_a": self.d_a,
                "phi": self.phi, "message": self.message}


# ---------------------------------------------------------------- parameters


def _uniform(rng, shape, d):
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class QRFGUParams:
    W_u: Parameter
    W_f: Parameter
    W_c: Parameter
    b_u: Parameter
    b_f: Parameter
    b_c: Parameter

    @classmethod
    def init(cls, rng, d, prefix=""):
        return cls(
            W_u=Parameter(_uniform(rng, (d, 3 * d), d), prefix + "W_u"),
            W_f=Parameter(_uniform(rng, (d, 3 * d), d), prefix + "W_f"),
            W_c=Parameter(_uniform(rng, (d, d), d), prefix + "W_c"),
            b_u=Parameter(np.zeros(d), prefix + "b_u"),
            b_f=Parameter(np.zeros(d), prefix + "b_f"),
            b_c=Parameter(np.zeros(d), prefix + "b_c"),
        )

    def named(self):
        return [("W_u", self.W_u), ("W_f", self.W_f), ("W_c", self.W_c),
                ("b_u", self.b_u), ("b_f", self.b_f), ("b_c", self.b_c)]


@dataclass
class GGATLayerParams:
    relation_table: Parameter  # (num augmented relations, d)
    W_s: Parameter  # (d_a, d)
    W_q: Parameter  # (d_a, d)
    W_a: Parameter  # (1, d_a)
    update: QRFGUParams
    message: QRFGUParams | None = None  # absent for the add/mul message variants

    def named(self):
        out = [("relation_table", self.relation_table)]
        if self.message is not None:
            out += [("message." + k, p) for k, p in self.message.named()]
        out += [("W_s", self.W_s), ("W_q", self.W_q), ("W_a", self.W_a)]
        out += [("update." + k, p) for k, p in self.update.named()]
        return out


@dataclass
class ModelParameters:
    config: EncoderConfig
    num_relations: int  # augmented count, 2R + 1
    layers: list
    W_score: Parameter  # (1, d)
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, num_relations: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        d, d_a = config.d, config.d_a
        layers = []
        for i in range(config.num_layers):
            pre = f"layers.{i}."
            layers.append(GGATLayerParams(
                relation_table=Parameter(_uniform(rng, (num_relations, d), d), pre + "relation_table"),
                message=QRFGUParams.init(rng, d, pre + "message.") if config.message == "qrfgu" else None,
                W_s=Parameter(_uniform(rng, (d_a, d), d), pre + "W_s"),
                W_q=Parameter(_uniform(rng, (d_a, d), d), pre + "W_q"),
                W_a=Parameter(_uniform(rng, (1, d_a), d), pre + "W_a"),
                update=QRFGUParams.init(rng, d, pre + "update."),
            ))
        W_score = Parameter(_uniform(rng, (1, d), d), "W_score")
        return cls(config, num_relations, layers, W_score)

    def named_parameters(self) -> list:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{k}", p) for k, p in layer.named()]
        out.append(("W_score", self.W_score))
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def dtype(self):
        return self.W_score.dtype


# ---------------------------------------------------------------- fusion unit


def qrfgu(h_rule, h_msg, h_q, p: QRFGUParams) -> Tensor:
    """Query-related fusion gate on rows: fuse a message into a rule state.

    update gate  g_u = sigmoid(W_u [h_rule, h_msg, h_q] + b_u)
    forget gate  g_f = sigmoid(W_f [h_rule, h_msg, h_q] + b_f)
    candidate    h_c = tanh(W_c (h_msg + g_f * h_rule) + b_c)
    output       (1 - g_u) * h_rule + g_u * h_c
    """
    x = nx.concat([h_rule, h_msg, h_q], axis=-1)
    g_u = nx.sigmoid(nx.linear(x, p.W_u, p.b_u))
    g_f = nx.sigmoid(nx.linear(x, p.W_f, p.b_f))
    h_c = nx.tanh(nx.linear(nx.add(h_msg, nx.mul(g_f, h_rule)), p.W_c, p.b_c))
    return nx.add(nx.mul(nx.sub(1.0, g_u), h_rule), nx.mul(g_u, h_c))


def qrfgu_gates(h_rule, h_msg, h_q, p: QRFGUParams):
    """Forward-only gate values (g_u, g_f, h_c) for inspection."""
    x = np.concatenate([np.asarray(h_rule), np.asarray(h_msg), np.asarray(h_q)], axis=-1)

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    g_u = sig(x @ p.W_u.data.T + p.b_u.data)
    g_f = sig(x @ p.W_f.data.T + p.b_f.data)
    h_c = np.tanh((np.asarray(h_msg) + g_f * np.asarray(h_rule)) @ p.W_c.data.T + p.b_c.data)
    return g_u, g_f, h_c


def message_function(h_s, h_r, h_q, layer: GGATLayerParams, kind: str) -> Tensor:
    if kind == "qrfgu":
        return qrfgu(h_s, h_r, h_q, layer.message)
    if kind == "add":
        return nx.add(h_s, h_r)
    if kind == "mul":
        return nx.mul(h_s, h_r)
    raise ValueError(kind)


# ---------------------------------------------------------------- state tables


@dataclass
class EntityStateTable:
    """Rule representations of the entities reached by one query."""

    entities: np.ndarray  # sorted entity ids
    values: Tensor  # (len(entities), d)

    def __len__(self):
        return len(self.entities)

    def __contains__(self, e):
        i = np.searchsorted(self.entities, e)
        return i < len(self.entities) and self.entities[i] == e

    def rows(self, entities) -> np.ndarray:
        entities = np.asarray(entities, dtype=np.int64)
        idx = np.searchsorted(self.entities, entities)
        idx_c = np.minimum(idx, max(len(self.entities) - 1, 0))
        if len(entities) and (len(self.entities) == 0 or np.any(self.entities[idx_c] != entities)):
            missing = entities[(idx >= len(self.entities)) | (self.entities[idx_c] != entities)]
            raise KeyError(f"entities without a state: {missing[:5].tolist()}")
        return idx

    def __getitem__(self, e) -> np.ndarray:
        return self.values.data[self.rows([e])[0]]

    def as_dict(self) -> dict:
        return {int(e): self.values.data[i] for i, e in enumerate(self.entities)}


# ---------------------------------------------------------------- layer pieces


def _pairs(edge_src, edge_rel):
    """Group consecutive edges sharing (source, relation). Edges must be sorted."""
    if len(edge_src) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    new = np.ones(len(edge_src), dtype=bool)
    new[1:] = (edge_src[1:] != edge_src[:-1]) | (edge_rel[1:] != edge_rel[:-1])
    edge_pair = np.cumsum(new) - 1
    return edge_src[new], edge_rel[new], edge_pair


def _gate_preactivation(W, b, sources, indices, d):
    # W [x_0, x_1, x_2] + b, each column block applied once per distinct source row
    tables = [nx.linear(x, nx.column_block(W, k * d, (k + 1) * d)) for k, x in enumerate(sources)]
    return nx.gathered_sum(tables, indices, b)


def fused_qrfgu(h_rule, h_msg, h_q, p: QRFGUParams, sources=None, indices=None) -> Tensor:
    """qrfgu() built from fused primitives.

    With ``sources``/``indices`` the rows of (h_rule, h_msg, h_q) are
    ``sources[k][indices[k]]``, which lets the gate matmuls run on the
    distinct source rows only.
    """
    d = p.W_c.shape[0]
    if sources is None:
        n = h_rule.shape[0]
        sources = (h_rule, h_msg, h_q)
        indices = (np.arange(n),) * 3
    pre_u = _gate_preactivation(p.W_u, p.b_u, sources, indices, d)
    pre_f = _gate_preactivation(p.W_f, p.b_f, sources, indices, d)
    return nx.gated_fusion(pre_u, pre_f, h_rule, h_msg, p.W_c, p.b_c)


def _pair_messages(h_prev, pair_src, pair_rel, pair_query, hq_b, layer, kind):
    h_s = nx.gather_rows(h_prev, pair_src)
    h_r = nx.gather_rows(layer.relation_table, pair_rel)
    if kind != "qrfgu":
        return message_function(h_s, h_r, None, layer, kind)
    return fused_qrfgu(h_s, h_r, None, layer.message,
                       sources=(h_prev, layer.relation_table, hq_b),
                       indices=(pair_src, pair_rel, pair_query))


def _attention_logits(m, pair_query, hq_b, layer) -> Tensor:
    proj_q = nx.linear(hq_b, layer.W_q)  # one row per query
    hidden = nx.relu(nx.add(nx.linear(m, layer.W_s), nx.gather_rows(proj_q, pair_query)))
    c = nx.linear(hidden, layer.W_a)
    return nx.reshape(c, (c.shape[0],))


def _aggregate(m_pair, weights, edge_pair, edge_dst, n_dst, phi) -> Tensor:
    m_e = nx.gather_rows(m_pair, edge_pair)
    summed = nx.scatter_sum(nx.scale_rows(m_e, weights), edge_dst, n_dst)
    return nx.ACTIVATIONS[phi](summed)


def _single_query_edges(states: EntityStateTable, edges):
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    src = states.rows(edges[:, 0])
    return edges, src


def compute_messages(edges, states: EntityStateTable, layer: GGATLayerParams, q: int,
                     kind: str = "qrfgu") -> Tensor:
    """One message per edge (s, r, o): fuse(h_s, h_r, h_q) with this layer's embeddings."""
    edges, src = _single_query_edges(states, edges)
    pair_src, pair_rel, edge_pair = _pairs(src, edges[:, 1])
    hq_b = nx.gather_rows(layer.relation_table, [q])
    m = _pair_messages(states.values, pair_src, pair_rel, np.zeros(len(pair_src), np.int64),
                       hq_b, layer, kind)
    return nx.gather_rows(m, edge_pair)


def attention(messages, q: int, edges, layer: GGATLayerParams) -> Tensor:
    """Softmax of W_a relu(W_s m + W_q h_q) over the edges sharing a tail entity."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    hq_b = nx.gather_rows(layer.relation_table, [q])
    c = _attention_logits(messages, np.zeros(len(edges), np.int64), hq_b, layer)
    _, dst = np.unique(edges[:, 2], return_inverse=True)
    return nx.scatter_softmax(c, dst.reshape(-1))


def aggregate(messages, weights, edges, phi: str = "relu") -> EntityStateTable:
    """phi(sum of attention-weighted messages) per tail entity."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
    targets, dst = np.unique(edges[:, 2], return_inverse=True)
    out = _aggregate(messages, weights, np.arange(len(edges)), dst.reshape(-1), len(targets), phi)
    return EntityStateTable(targets, out)


def update_states(prev: EntityStateTable, candidate: EntityStateTable, q: int,
                  layer: GGATLayerParams) -> EntityStateTable:
    """Fuse each entity's previous state (zero when newly reached) with its candidate."""
    entities = np.union1d(prev.entities, candidate.entities)
    d = layer.relation_table.shape[1]
    old = nx.expand_rows(prev.values, np.searchsorted(entities, prev.entities), len(entities))
    cand = nx.expand_rows(candidate.values, np.searchsorted(entities, candidate.entities), len(entities))
    hq = nx.gather_rows(layer.relation_table, np.full(len(entities), q))
    assert old.shape[1] == d
    return EntityStateTable(entities, qrfgu(old, cand, hq, layer.update))


# ---------------------------------------------------------------- encoder


@dataclass
class LayerTrace:
    kind: str  # "explore" or "buffer"
    edge_ids: np.ndarray  # rows of kg.triples
    edge_src: np.ndarray  # node index in the previous layer's node list
    edge_dst: np.ndarray  # node index in this layer's node list
    attention: np.ndarray
    node_query: np.ndarray
    node_entity: np.ndarray


@dataclass
class Encoding:
    heads: np.ndarray
    relations: np.ndarray
    node_query: np.ndarray  # (N,) query index of each node
    node_entity: np.ndarray  # (N,) entity id of each node
    states: Tensor  # (N, d)
    traces: list

    @property
    def message_counts(self) -> list:
        return [len(t.edge_ids) for t in self.traces]

    def table(self, b: int = 0) -> EntityStateTable:
        sel = np.flatnonzero(self.node_query == b)
        return EntityStateTable(self.node_entity[sel], Tensor(self.states.data[sel]))


@dataclass
class _Frontier:
    node_query: np.ndarray
    node_entity: np.ndarray
    edge_ids: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    prev_to_new: np.ndarray


def expand_nodes(kg: KnowledgeGraph, node_query, node_entity, exclude=None) -> _Frontier:
    """Batched frontier step. ``exclude`` holds keys query*len(kg)+edge_id of edges to hide."""
    eids, owner = _csr_edge_ids(kg, node_entity)
    if exclude is not None and len(exclude):
        keep = ~np.isin(node_query[owner] * len(kg) + eids, exclude)
        eids, owner = eids[keep], owner[keep]
    V = kg.num_entities
    tails = kg.triples[eids, 2]
    edge_key = node_query[owner] * V + tails
    prev_key = node_query * V + node_entity
    new_key = np.union1d(prev_key, edge_key)
    return _Frontier(
        node_query=new_key // V,
        node_entity=new_key % V,
        edge_ids=eids,
        edge_src=owner,
        edge_dst=np.searchsorted(new_key, edge_key),
        prev_to_new=np.searchsorted(new_key, prev_key),
    )


def query_exclusions(kg: KnowledgeGraph, heads, relations, answers) -> np.ndarray:
    """Keys of the query edges (s, q, a) and their inverses, hidden while training on them."""
    rows = []
    for b, (s, q, ans) in enumerate(zip(heads, relations, answers)):
        inv = int(kg.inverse_relation(q))
        for a in ans:
            rows.append((b, s, q, a))
            rows.append((b, a, inv, s))
    if not rows:
        return np.zeros(0, np.int64)
    rows = np.array(rows, dtype=np.int64)
    ids = kg.edge_ids(rows[:, 1:])
    ok = ids >= 0
    return np.unique(rows[ok, 0] * len(kg) + ids[ok])


def _ggat_layer(layer, h_prev, node_query_prev, fr_query, fr_dst_count, edge_src, edge_rel,
                edge_dst, prev_to_new, hq_b, config):
    pair_src, pair_rel, edge_pair = _pairs(edge_src, edge_rel)
    pair_query = node_query_prev[pair_src]
    m = _pair_messages(h_prev, pair_src, pair_rel, pair_query, hq_b, layer, config.message)
    c = _attention_logits(m, pair_query, hq_b, layer)
    a = nx.scatter_softmax(nx.gather_rows(c, edge_pair), edge_dst, fr_dst_count)
    cand = nx.ACTIVATIONS[config.phi](nx.weighted_edge_sum(a, m, edge_pair, edge_dst, fr_dst_count))
    old = h_prev if prev_to_new is None else nx.expand_rows(h_prev, prev_to_new, fr_dst_count)
    n_new = fr_dst_count
    h_new = fused_qrfgu(old, cand, None, layer.update, sources=(old, cand, hq_b),
                        indices=(np.arange(n_new), np.arange(n_new), fr_query))
    return h_new, a


def encode_batch(kg: KnowledgeGraph, heads, relations, params: ModelParameters,
                 exclude=None) -> Encoding:
    """Run n exploration layers on growing frontiers, then m buffer layers on the last one."""
    config = params.config
    heads = np.asarray(heads, dtype=np.int64).reshape(-1)
    relations = np.asarray(relations, dtype=np.int64).reshape(-1)
    if len(heads) != len(relations):
        raise ValueError("heads and relations differ in length")
    if len(heads) and (heads.min() < 0 or heads.max() >= kg.num_entities):
        raise IndexError("query head out of range")
    if len(relations) and (relations.min() < 0 or relations.max() >= params.num_relations):
        raise IndexError("query relation out of range")
    if kg.num_relations != params.num_relations:
        raise ValueError(f"graph has {kg.num_relations} relations, model expects {params.num_relations}")
    B = len(heads)
    node_query = np.arange(B, dtype=np.int64)
    node_entity = heads.copy()
    h = Tensor(np.zeros((B, config.d), dtype=params.dtype))
    traces = []
    fr = None
    for i in range(config.n):
        layer = params.layers[i]
        fr = expand_nodes(kg, node_query, node_entity, exclude)
        hq_b = nx.gather_rows(layer.relation_table, relations)
        h, a = _ggat_layer(layer, h, node_query, fr.node_query, len(fr.node_query), fr.edge_src,
                           kg.triples[fr.edge_ids, 1], fr.edge_dst, fr.prev_to_new, hq_b, config)
        traces.append(LayerTrace("explore", fr.edge_ids, fr.edge_src, fr.edge_dst, a.data,
                                 fr.node_query, fr.node_entity))
        node_query, node_entity = fr.node_query, fr.node_entity
    # buffer layers reuse the final edge set with sources re-indexed into the final node list
    buf_src = fr.prev_to_new[fr.edge_src]
    buf_rel = kg.triples[fr.edge_ids, 1]
    for j in range(config.m):
        layer = params.layers[config.n + j]
        hq_b = nx.gather_rows(layer.relation_table, relations)
        h, a = _ggat_layer(layer, h, node_query, node_query, len(node_query), buf_src, buf_rel,
                           fr.edge_dst, None, hq_b, config)
        traces.append(LayerTrace("buffer", fr.edge_ids, buf_src, fr.edge_dst, a.data,
                                 node_query, node_entity))
    return Encoding(heads, relations, node_query, node_entity, h, traces)


def encode(kg: KnowledgeGraph, s_q: int, q: int, params: ModelParameters) -> EntityStateTable:
    return encode_batch(kg, [s_q], [q], params).table(0)


def count_messages(encoding: Encoding) -> dict:
    per_layer = encoding.message_counts
    return {"per_layer": per_layer, "total": int(sum(per_layer))}


# ---------------------------------------------------------------- scoring


def score_nodes(states, params: ModelParameters) -> Tensor:
    s = nx.linear(states, params.W_score)
    return nx.reshape(s, (s.shape[0],))


def score_batch(encoding: Encoding, params: ModelParameters, num_entities: int) -> Tensor:
    """(B, |V|) scores; entities a query never reached score exactly 0."""
    s = score_nodes(encoding.states, params)
    return nx.scatter_dense(s, encoding.node_query, encoding.node_entity,
                            (len(encoding.heads), num_entities))


def score_entities(states: EntityStateTable, params: ModelParameters, num_entities: int) -> np.ndarray:
    out = np.zeros(num_entities, dtype=params.dtype)
    if len(states):
        out[states.entities] = score_nodes(states.values, params).data
    return out


# ---------------------------------------------------------------- probes


def encode_relation_path(relations, q: int, params: ModelParameters, shared_layer: int | None = None,
                         kind: str | None = None) -> np.ndarray:
    """Fold a relation sequence through the message function, starting from zero.

    Position i uses layer min(i, n) embeddings (1-based), or ``shared_layer``
    for every position when given.
    """
    relations = list(relations)
    if not relations:
        raise ValueError("relation path is empty")
    kind = kind or params.config.message
    d = params.config.d
    h = np.zeros((1, d), dtype=params.dtype)
    for pos, r in enumerate(relations, start=1):
        li = (shared_layer if shared_layer is not None else min(pos, params.config.n)) - 1
        layer = params.layers[li]
        h_r = layer.relation_table.data[[r]]
        h_q = layer.relation_table.data[[q]]
        h = message_function(Tensor(h), Tensor(h_r), Tensor(h_q), layer, kind).data
    return h[0]


def apply_variant(config: EncoderConfig, variant: str) -> EncoderConfig:
    """Encoder config for one of the ablation variants."""
    if variant in ("full", "full-qrfgu"):
        return replace(config, message="qrfgu")
    if variant == "message-addition":
        return replace(config, message="add")
    if variant == "message-multiplication":
        return replace(config, message="mul")
    if variant == "no-buffer":
        return replace(config, m=0)
    raise ValueError(f"unknown variant {variant!r}")


VARIANTS = ("full-qrfgu", "no-buffer", "message-addition", "message-multiplication")
