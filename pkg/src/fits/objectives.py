"""Loss heads for both training stages and the answer-prediction rule.

Every function records onto a :class:`~fits.numerics.Graph` so gradients of
any combination of terms come from one backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fits.errors import LabelMissing, NothingToScore, ShapeError
from fits.encoder import Params
from fits.numerics.autodiff import Graph, Node


# -- post-training ----------------------------------------------------------


def ka_pair_score(g: Graph, P: Params, e_l: Node, e_g: Node) -> Node:
    """Match probability ``sigmoid(w1 . relu(W0 [e_l; e_g] + b0))`` per row."""
    x = g.concat([e_l, e_g], axis=-1)
    return g.sigmoid(g.relu(x @ P["ka.l0.w"] + P["ka.l0.b"]) @ P["ka.w1"])


def ka_loss(g: Graph, scores: Node, labels: Sequence[int]) -> Node:
    """Binary cross-entropy averaged over the 2k scored pairs (logs clamped)."""
    y = np.asarray(labels, dtype=np.float64)
    if scores.shape != y.shape:
        raise ShapeError(f"ka_loss: {scores.shape} scores vs {y.shape} labels")
    pos = g.mul(g.log(scores), g.const(y))
    neg = g.mul(g.log(1.0 - scores), g.const(1.0 - y))
    return g.scale(g.mean(pos + neg), -1.0)


def mlm_logits(g: Graph, P: Params, h: Node) -> Node:
    return h @ P["mlm.w"] + P["mlm.b"]


def mlm_loss(g: Graph, logits: Node, targets: Sequence[int], weights=None) -> Node:
    """Mean token cross-entropy over masked positions.

    ``weights`` (summing to 1) replaces the plain mean when positions from
    several sequences are scored together, so each sequence counts equally.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise NothingToScore("mlm_loss: no masked positions")
    ce = g.cross_entropy(logits, targets)
    if weights is None:
        return g.mean(ce)
    return g.sum(g.mul(ce, g.const(np.asarray(weights, dtype=np.float64))))


def post_loss(g: Graph, ka: Node | None, mlm: Node | None) -> Node:
    """Unweighted sum of the enabled post-training terms."""
    terms = [t for t in (ka, mlm) if t is not None]
    if not terms:
        raise ValueError("post_loss needs at least one term")
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


# -- fine-tuning ------------------------------------------------------------


def attentive_pool(
    g: Graph, P: Params, E: Node, h_int: Node, rows: np.ndarray, owner: np.ndarray
) -> Node:
    """Per-candidate softmax pooling of node rows with ``h_int`` as query.

    ``rows`` are entity-node rows of ``E`` and ``owner`` their candidate
    index.  Candidates without entity nodes get a zero vector.
    """
    C = h_int.shape[0]
    if len(rows) == 0:
        return g.const(np.zeros((C, E.shape[-1])))
    query = h_int @ P["qa.query.w"]
    nodes = g.gather(E, rows)
    logits = g.dot(nodes, g.gather(query, owner))
    w = g.segment_softmax(logits, owner, C)
    return g.scatter_add(g.mul(g.reshape(w, (len(rows), 1)), nodes), owner, C)


def qa_candidate_score(g: Graph, P: Params, h_int: Node, e_int: Node, pooled: Node) -> Node:
    """Unnormalised candidate logit from a two-layer MLP on ``[h_int; e_int; g]``."""
    x = g.concat([h_int, e_int, pooled], axis=-1)
    return g.relu(x @ P["qa.l1.w"] + P["qa.l1.b"]) @ P["qa.l2.w"] + P["qa.l2.b"]


def qa_loss(g: Graph, logits: Node, correct: Sequence[int]) -> Node:
    """``-log p(correct)`` under the candidate softmax, averaged over examples.

    ``logits`` is ``(examples, n)``.
    """
    return g.mean(g.cross_entropy(logits, np.asarray(correct, dtype=np.int64)))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(probs) -> int:
    """Argmax over candidates; the lowest index wins ties."""
    probs = np.asarray(probs)
    if probs.size == 0:
        raise ValueError("predict needs at least one candidate")
    return int(np.argmax(probs))


def ksd_logits(g: Graph, P: Params, e: Node) -> Node:
    return g.relu(e @ P["ksd.l2.w"] + P["ksd.l2.b"]) @ P["ksd.w3"]


def ksd_loss(g: Graph, P: Params, e: Node, labels: Sequence, scale: float = 1.0) -> Node:
    """Summed 4-way cross-entropy of each node's source label (1..4)."""
    labels = list(labels)
    if any(lab not in (1, 2, 3, 4) for lab in labels):
        raise LabelMissing("every scored node needs a source label in 1..4")
    ce = g.cross_entropy(ksd_logits(g, P, e), np.asarray(labels, dtype=np.int64) - 1)
    return g.scale(g.sum(ce), scale)


def kbr_loss(
    g: Graph, E: Node, rel_table: Node, heads: np.ndarray, rels: np.ndarray, tails: np.ndarray,
    scale: float = 1.0,
) -> Node:
    """``sum(1 - cos(e_h + e_r, e_t))`` over the given triplets."""
    if len(heads) == 0:
        return g.const(0.0)
    left = g.gather(E, heads) + g.embedding(rel_table, rels)
    cos = g.cosine_similarity(left, g.gather(E, tails))
    return g.scale(g.sum(1.0 - cos), scale)


@dataclass(frozen=True)
class LossSwitches:
    mlm: bool = True
    ka: bool = True
    ksd: bool = True
    kbr: bool = True


def finetune_loss(g: Graph, sup: Node, ksd: Node | None, kbr: Node | None, switches=LossSwitches()) -> Node:
    """``L_sup + L_ksd + L_kbr`` with disabled auxiliary terms dropped."""
    out = sup
    if switches.ksd and ksd is not None:
        out = out + ksd
    if switches.kbr and kbr is not None:
        out = out + kbr
    return out
