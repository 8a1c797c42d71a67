"""Cross-modality encoder: a small pre-norm transformer over the merged text,
a relational graph-attention network over the retrieved subgraph, and an MLP
that mixes the interaction token with the interaction node after every
fusion layer.

Candidates are encoded in batches.  Text is a padded ``(C, L, d_l)`` tensor
with the interaction token at column 0.  The C subgraphs are laid out as one
disjoint node matrix where each candidate owns a contiguous block whose first
row is its interaction node, followed by its entity nodes in subgraph order.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from fits.corpus import INT_ID, PAD_ID
from fits.errors import ConfigError, SequenceTooLong, SpanError
from fits.kg_store import (
    ANSWER_LINKED,
    INTERACTION_RELATION,
    IRRELEVANT,
    QUESTION_LINKED,
    Mention,
    SubGraph,
)
from fits.numerics.autodiff import Graph, Node

# node-type input classes; injected nodes look like ordinary neighbours so the
# source-distinction head has to infer irrelevance from structure
TYPE_QUESTION, TYPE_ANSWER, TYPE_OTHER, TYPE_INTERACTION = range(4)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_entities: int
    n_relations: int
    d_l: int = 32
    d_g: int = 16
    n_unimodal: int = 1
    n_fusion: int = 2
    heads: int = 2
    gat_heads: int = 2
    max_len: int = 32
    ff: int = 64
    qa_hidden: int = 32
    fuse_residual: bool = True
    ka_distance_init: bool = True

    def __post_init__(self):
        if self.d_l % self.heads or self.d_g % self.gat_heads:
            raise ConfigError("widths must be divisible by their head counts")
        if self.n_unimodal < 0 or self.n_fusion < 1:
            raise ConfigError("need n_unimodal >= 0 and n_fusion >= 1")

    @property
    def d(self) -> int:
        return self.d_l + self.d_g


def init_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    """All encoder and loss-head parameters, float64, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def dense(name, fan_in, fan_out, bias=True):
        p[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        if bias:
            p[f"{name}.b"] = np.zeros(fan_out)

    def norm(name, width):
        p[f"{name}.g"] = np.ones(width)
        p[f"{name}.b"] = np.zeros(width)

    d_l, d_g, d = cfg.d_l, cfg.d_g, cfg.d
    p["tok_emb"] = rng.normal(0.0, 1.0, size=(cfg.vocab_size, d_l))
    p["pos_emb"] = rng.normal(0.0, 0.5, size=(cfg.max_len, d_l))
    for i in range(cfg.n_unimodal + cfg.n_fusion):
        pre = f"lm.{i}"
        norm(f"{pre}.ln1", d_l)
        for part in ("q", "k", "v", "o"):
            dense(f"{pre}.{part}", d_l, d_l)
        norm(f"{pre}.ln2", d_l)
        dense(f"{pre}.ff1", d_l, cfg.ff)
        dense(f"{pre}.ff2", cfg.ff, d_l)
    p["ent_emb"] = rng.normal(0.0, 1.0, size=(cfg.n_entities, d_g))
    p["type_emb"] = rng.normal(0.0, 1.0, size=(3, d_g))
    p["int_node"] = rng.normal(0.0, 1.0, size=(d_g,))
    # last row is reserved for interaction edges
    p["rel_emb"] = rng.normal(0.0, 1.0, size=(cfg.n_relations + 1, d_g))
    for j in range(cfg.n_fusion):
        pre = f"gnn.{j}"
        norm(f"{pre}.ln", d_g)
        for part in ("q", "k", "v", "o"):
            dense(f"{pre}.{part}", d_g, d_g, bias=False)
        dense(f"fuse.{j}.l1", d, d)
        dense(f"fuse.{j}.l2", d, d)
    # knowledge-adaptive matching head
    dense("ka.l0", d, d)
    p["ka.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d,))
    if cfg.ka_distance_init:
        _distance_detector(p, d_l, d_g)
    dense("mlm", d_l, cfg.vocab_size)
    # QA head: attentive-pool query map and scoring MLP over [h_int; e_int; g]
    p["qa.query.w"] = rng.normal(0.0, 1.0 / np.sqrt(d_l), size=(d_l, d_g))
    dense("qa.l1", d_l + 2 * d_g, cfg.qa_hidden)
    p["qa.l2.w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.qa_hidden), size=(cfg.qa_hidden,))
    p["qa.l2.b"] = np.zeros(1)
    # source-distinction head; ksd.w3 is stored input-major (d_g x 4)
    dense("ksd.l2", d_g, d_g)
    p["ksd.w3"] = rng.normal(0.0, 1.0 / np.sqrt(d_g), size=(d_g, 4))
    return p


# steepness of the initial matching head; negatives start well separated so
# the head has no incentive to inflate representation norms
_KA_SLOPE = 4.0


def _distance_detector(p: dict[str, np.ndarray], d_l: int, d_g: int) -> None:
    """Start the matching head as ``sigmoid(s * (1 - mean_i |e_L[i] - e_G[i]|))``
    over the shared leading width, on top of a small random part.

    Hidden units come in pairs ``relu(x - y)``, ``relu(y - x)`` whose sum is
    ``|x - y|``; one spare unit with a constant input acts as the output bias.
    The head keeps its MLP form and stays fully trainable; only the starting
    point changes, so the matching gradient pulls the two modalities together
    coordinate by coordinate instead of being absorbed by an arbitrary map.
    """
    w0, b0, w1 = p["ka.l0.w"], p["ka.l0.b"], p["ka.w1"]
    width = min(d_l, d_g)
    w0 *= 0.1
    w1 *= 0.1
    for i in range(width):
        for unit, sign in ((2 * i, 1.0), (2 * i + 1, -1.0)):
            w0[:, unit] = 0.0
            w0[i, unit] = sign
            w0[d_l + i, unit] = -sign
            w1[unit] = -_KA_SLOPE / width
    if 2 * width < w0.shape[1]:
        bias_unit = 2 * width
        w0[:, bias_unit] = 0.0
        b0[bias_unit] = 1.0
        w1[bias_unit] = _KA_SLOPE


@dataclass
class ModelState:
    """Encoder configuration, vocabulary and parameter buffers."""

    config: EncoderConfig
    params: dict[str, np.ndarray]
    vocab: list[str] = field(default_factory=list)
    stage: str = "INIT"

    @classmethod
    def create(cls, config: EncoderConfig, seed: int, vocab: Sequence[str] = ()) -> "ModelState":
        return cls(config, init_params(config, seed), list(vocab))

    def copy(self) -> "ModelState":
        return ModelState(
            self.config, {k: v.copy() for k, v in self.params.items()}, list(self.vocab), self.stage
        )

    def config_dict(self) -> dict:
        return asdict(self.config)


class Params:
    """Lazily binds parameter arrays into one graph as named leaves."""

    def __init__(self, g: Graph, params: dict[str, np.ndarray]):
        self.g = g
        self.arrays = params

    def __getitem__(self, name: str) -> Node:
        return self.g.param(name, self.arrays[name])


# ---------------------------------------------------------------------------
# batch layout
# ---------------------------------------------------------------------------


@dataclass
class CandidateInput:
    token_ids: Sequence[int]
    mentions: Sequence[Mention]
    subgraph: SubGraph


@dataclass
class BatchLayout:
    n_cand: int
    seq_len: int
    ids: np.ndarray  # (C, L) with INT at column 0
    key_mask: np.ndarray  # (C, 1, 1, L), True where the key is a real token
    node_table_idx: np.ndarray  # (R,) rows of [ent_emb; int_node]
    node_type: np.ndarray  # (R,)
    node_cand: np.ndarray  # (R,) owning candidate
    node_label: np.ndarray  # (R,) source label, 0 for interaction nodes
    int_rows: np.ndarray  # (C,)
    entity_rows: np.ndarray  # rows of all entity nodes
    block_start: np.ndarray  # (C,) first row of each candidate block
    local_rows: list  # per candidate: subgraph local index -> row
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_rel: np.ndarray
    edge_kg: np.ndarray  # bool, False for interaction edges

    @property
    def n_rows(self) -> int:
        return int(self.node_type.shape[0])


def layout_batch(cfg: EncoderConfig, items: Sequence[CandidateInput]) -> BatchLayout:
    C = len(items)
    L = max(len(it.token_ids) for it in items) + 1
    if L > cfg.max_len:
        raise SequenceTooLong(f"sequence of {L - 1} tokens + interaction exceeds {cfg.max_len}")
    ids = np.full((C, L), PAD_ID, dtype=np.int64)
    ids[:, 0] = INT_ID
    for c, it in enumerate(items):
        ids[c, 1 : 1 + len(it.token_ids)] = it.token_ids
    key_mask = (ids != PAD_ID)[:, None, None, :]

    table_idx, types, cand, labels = [], [], [], []
    int_rows, entity_rows, block_start, local_rows = [], [], [], []
    src, dst, rel, kg_edge = [], [], [], []
    for c, it in enumerate(items):
        sg = it.subgraph
        start = len(types)
        block_start.append(start)
        int_rows.append(start)
        table_idx.append(cfg.n_entities)
        types.append(TYPE_INTERACTION)
        cand.append(c)
        labels.append(0)
        rows = {sg.interaction_node_index: start}
        for local, (eid, lab) in enumerate(zip(sg.node_ids, sg.labels)):
            if eid is None:
                continue
            row = len(types)
            rows[local] = row
            entity_rows.append(row)
            table_idx.append(eid)
            types.append(
                TYPE_QUESTION
                if lab == QUESTION_LINKED
                else TYPE_ANSWER if lab == ANSWER_LINKED else TYPE_OTHER
            )
            cand.append(c)
            labels.append(lab)
        local_rows.append(rows)
        for h, r, t in sg.edges:
            src.append(rows[h])
            dst.append(rows[t])
            rel.append(cfg.n_relations if r == INTERACTION_RELATION else r)
            kg_edge.append(r != INTERACTION_RELATION)
    as_i = lambda x: np.asarray(x, dtype=np.int64)  # noqa: E731
    return BatchLayout(
        C, L, ids, key_mask, as_i(table_idx), as_i(types), as_i(cand), as_i(labels),
        as_i(int_rows), as_i(entity_rows), as_i(block_start), local_rows,
        as_i(src), as_i(dst), as_i(rel), np.asarray(kg_edge, dtype=bool),
    )


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def embed_text(g: Graph, P: Params, ids: np.ndarray) -> Node:
    """Token plus learned position embedding; ``ids`` already carries INT at 0."""
    L = ids.shape[-1]
    if L > P.arrays["pos_emb"].shape[0]:
        raise SequenceTooLong(f"{L} positions exceed {P.arrays['pos_emb'].shape[0]}")
    return g.embedding(P["tok_emb"], ids) + g.slice(P["pos_emb"], np.s_[:L])


def _heads(g: Graph, x: Node, n_heads: int) -> Node:
    C, L, d = x.shape
    return g.transpose(g.reshape(x, (C, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def lm_layer(g: Graph, P: Params, i: int, X: Node, key_mask: np.ndarray, n_heads: int):
    """Pre-norm self-attention and feed-forward block, both residual."""
    pre = f"lm.{i}"
    C, L, d = X.shape
    h = g.layer_norm(X, P[f"{pre}.ln1.g"], P[f"{pre}.ln1.b"])
    q = _heads(g, h @ P[f"{pre}.q.w"] + P[f"{pre}.q.b"], n_heads)
    k = _heads(g, h @ P[f"{pre}.k.w"] + P[f"{pre}.k.b"], n_heads)
    v = _heads(g, h @ P[f"{pre}.v.w"] + P[f"{pre}.v.b"], n_heads)
    ctx, weights = g.attention(q, k, v, mask=key_mask)
    ctx = g.reshape(g.transpose(ctx, (0, 2, 1, 3)), (C, L, d))
    X = X + (ctx @ P[f"{pre}.o.w"] + P[f"{pre}.o.b"])
    h = g.layer_norm(X, P[f"{pre}.ln2.g"], P[f"{pre}.ln2.b"])
    ff = g.relu(h @ P[f"{pre}.ff1.w"] + P[f"{pre}.ff1.b"]) @ P[f"{pre}.ff2.w"] + P[f"{pre}.ff2.b"]
    return X + ff, weights


def gnn_layer(
    g: Graph,
    P: Params,
    j: int,
    E: Node,
    src: np.ndarray,
    dst: np.ndarray,
    rel: np.ndarray,
    n_heads: int,
):
    """Relational graph attention with a residual connection.

    The message along ``src -> dst`` is ``LN(e_src) + rel_emb[r]``; each head
    scores it by ``query(dst) . key(message)`` and normalises over the
    in-edges of ``dst``.  A node with no in-edges receives an all-zero
    aggregate and so is returned unchanged.  Returns ``(E', alpha)`` with
    ``alpha`` of shape ``(edges, heads)``.
    """
    pre = f"gnn.{j}"
    n, d = E.shape
    if len(src) == 0:
        return E, g.const(np.zeros((0, n_heads)))
    dh = d // n_heads
    h = g.layer_norm(E, P[f"{pre}.ln.g"], P[f"{pre}.ln.b"])
    msg = g.gather(h, src) + g.embedding(P["rel_emb"], rel)
    q = g.reshape(g.gather(h @ P[f"{pre}.q.w"], dst), (len(dst), n_heads, dh))
    k = g.reshape(msg @ P[f"{pre}.k.w"], (len(dst), n_heads, dh))
    v = g.reshape(msg @ P[f"{pre}.v.w"], (len(dst), n_heads, dh))
    logits = g.scale(g.dot(q, k), 1.0 / np.sqrt(dh))
    alpha = g.segment_softmax(logits, dst, n)
    weighted = g.mul(g.reshape(alpha, (len(dst), n_heads, 1)), v)
    agg = g.reshape(g.scatter_add(weighted, dst, n), (n, d))
    return E + g.relu(agg @ P[f"{pre}.o.w"]), alpha


def fuse_interaction(g: Graph, P: Params, j: int, h_int: Node, e_int: Node, residual: bool = True):
    """Two-layer MLP over ``[h_int; e_int]``, split back into (d_l, d_g)."""
    pre = f"fuse.{j}"
    d_l = h_int.shape[-1]
    x = g.concat([h_int, e_int], axis=-1)
    y = g.relu(x @ P[f"{pre}.l1.w"] + P[f"{pre}.l1.b"]) @ P[f"{pre}.l2.w"] + P[f"{pre}.l2.b"]
    if residual:
        y = x + y
    return g.slice(y, np.s_[..., :d_l]), g.slice(y, np.s_[..., d_l:])


# ---------------------------------------------------------------------------
# full encoder
# ---------------------------------------------------------------------------


@dataclass
class BatchEncoding:
    """Final text/node representations for a batch of candidates.

    ``H`` is ``(C, L, d_l)``; ``E`` is ``(R, d_g)`` over the block layout.
    ``gat_alpha`` holds the last fusion layer's per-edge attention averaged
    over heads (a plain array, for diagnostics).
    """

    layout: BatchLayout
    H: Node
    E: Node
    gat_alpha: np.ndarray
    text_attention: list = field(default_factory=list)

    def h_int(self, g: Graph) -> Node:
        return g.slice(self.H, np.s_[:, 0, :])

    def e_int(self, g: Graph) -> Node:
        return g.gather(self.E, self.layout.int_rows)


def encode_batch(g: Graph, P: Params, cfg: EncoderConfig, layout: BatchLayout) -> BatchEncoding:
    X = embed_text(g, P, layout.ids)
    text_att = []
    for i in range(cfg.n_unimodal):
        X, w = lm_layer(g, P, i, X, layout.key_mask, cfg.heads)
        text_att.append(w)
    table = g.concat([P["ent_emb"], g.reshape(P["int_node"], (1, cfg.d_g))], axis=0)
    types = g.concat([P["type_emb"], g.const(np.zeros((1, cfg.d_g)))], axis=0)
    E = g.embedding(table, layout.node_table_idx) + g.embedding(types, layout.node_type)
    n = layout.n_rows
    alpha = np.zeros((0, cfg.gat_heads))
    for j in range(cfg.n_fusion):
        X, w = lm_layer(g, P, cfg.n_unimodal + j, X, layout.key_mask, cfg.heads)
        text_att.append(w)
        E, alpha_node = gnn_layer(
            g, P, j, E, layout.edge_src, layout.edge_dst, layout.edge_rel, cfg.gat_heads
        )
        alpha = alpha_node.value
        h_tilde = g.slice(X, np.s_[:, 0, :])
        e_tilde = g.gather(E, layout.int_rows)
        h_new, e_new = fuse_interaction(g, P, j, h_tilde, e_tilde, cfg.fuse_residual)
        C = layout.n_cand
        X = g.concat([g.reshape(h_new, (C, 1, cfg.d_l)), g.slice(X, np.s_[:, 1:, :])], axis=1)
        E = E + g.scatter_add(e_new - e_tilde, layout.int_rows, n)
    return BatchEncoding(layout, X, E, alpha.mean(axis=1), text_att)


def mention_rows(layout: BatchLayout, mentions_per_cand: Sequence[Sequence[Mention]]):
    """Row spans into ``H`` flattened to ``(C*L, d_l)``; token i sits at column i+1."""
    spans = []
    for c, mentions in enumerate(mentions_per_cand):
        base = c * layout.seq_len + 1
        for m in mentions:
            if m.end <= m.start:
                raise SpanError(f"empty mention span [{m.start}, {m.end})")
            spans.append((base + m.start, base + m.end))
    return spans


def pool_text_entities(g: Graph, H: Node, spans: Sequence[tuple[int, int]]) -> Node:
    """Mean of the token rows inside each span of a 2-D representation matrix."""
    for s, e in spans:
        if e <= s:
            raise SpanError(f"empty span [{s}, {e})")
    return g.mean_pool(H, spans)


@dataclass
class EncodedPair:
    """One candidate's encoding as plain arrays; row 0 is the interaction row."""

    H_M: np.ndarray
    E_M: np.ndarray
    E_L: np.ndarray
    node_ids: list
    gat_to_interaction: dict  # subgraph local index -> attention weight


def encode(model: ModelState, item: CandidateInput) -> EncodedPair:
    g = Graph()
    P = Params(g, model.params)
    layout = layout_batch(model.config, [item])
    enc = encode_batch(g, P, model.config, layout)
    H = enc.H.value[0]
    E = enc.E.value
    spans = mention_rows(layout, [item.mentions])
    E_L = (
        g.mean_pool(g.reshape(enc.H, (layout.seq_len, model.config.d_l)), spans).value
        if spans
        else np.zeros((0, model.config.d_l))
    )
    rows = layout.local_rows[0]
    order = [item.subgraph.interaction_node_index] + item.subgraph.entity_positions()
    att = interaction_attention(enc, 0)
    return EncodedPair(
        H_M=H,
        E_M=E[[rows[i] for i in order]],
        E_L=E_L,
        node_ids=[item.subgraph.node_ids[i] for i in order],
        gat_to_interaction=att,
    )


def interaction_attention(enc: BatchEncoding, c: int) -> dict[int, float]:
    """Last-layer attention on edges into candidate ``c``'s interaction node,
    keyed by the sender's subgraph local index."""
    lay = enc.layout
    inv = {row: local for local, row in lay.local_rows[c].items()}
    target = lay.int_rows[c]
    out = {}
    for e in np.flatnonzero(lay.edge_dst == target):
        out[inv[int(lay.edge_src[e])]] = float(enc.gat_alpha[e])
    return out
