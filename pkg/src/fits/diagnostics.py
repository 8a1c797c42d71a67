"""Model analyses: modality alignment, PCA coordinates, attention readback and
accuracy on the reasoning/parametric probe sets."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fits.corpus import McqaExample, Vocab, apply_operation_a, apply_operation_b
from fits.encoder import CandidateInput, ModelState, encode
from fits.errors import EmptyReport
from fits.kg_store import IRRELEVANT, KnowledgeGraph
from fits.numerics.linalg import pca_project, pearson_r
from fits.trainer import evaluate_accuracy

__all__ = [
    "AlignmentReport",
    "AttentionReport",
    "aligned_representations",
    "entity_alignment_correlation",
    "modality_pca",
    "pca_tsv",
    "centroid_distance",
    "attention_report",
    "evaluate_accuracy",
    "probe_accuracies",
]


@dataclass(frozen=True)
class AlignmentReport:
    same_mean: float
    same_std: float
    mismatched_mean: float
    mismatched_std: float
    n_same: int
    n_mismatched: int
    width: int  # number of leading dimensions compared

    @property
    def gap(self) -> float:
        return self.same_mean - self.mismatched_mean

    def to_dict(self) -> dict:
        return {
            "same_mean": self.same_mean,
            "same_std": self.same_std,
            "mismatched_mean": self.mismatched_mean,
            "mismatched_std": self.mismatched_std,
            "n_same": self.n_same,
            "n_mismatched": self.n_mismatched,
            "width": self.width,
            "gap": self.gap,
        }


@dataclass
class AttentionReport:
    """Per candidate, ``(surface, weight)`` pairs sorted by weight, descending."""

    example_id: str
    candidates: list[list[tuple[str, float]]] = field(default_factory=list)


def _inputs(model: ModelState, ex: McqaExample) -> list[CandidateInput]:
    vocab = Vocab(model.vocab)
    return [
        CandidateInput(vocab.encode(ex.merged[c]), ex.mentions[c], ex.subgraphs[c])
        for c in range(ex.n_candidates)
    ]


def aligned_representations(model: ModelState, examples: Sequence[McqaExample]):
    """Collect ``(E_L row, E_G row, entity id)`` for every mention whose
    entity is a node of its candidate's subgraph."""
    text_rows, node_rows, ents = [], [], []
    for ex in examples:
        for item in _inputs(model, ex):
            enc = encode(model, item)
            # E_M row 0 is the interaction node; entity rows follow in node order
            row_of = {eid: r for r, eid in enumerate(enc.node_ids) if eid is not None}
            for mi, m in enumerate(item.mentions):
                r = row_of.get(m.entity)
                if r is None:
                    continue
                text_rows.append(enc.E_L[mi])
                node_rows.append(enc.E_M[r])
                ents.append(m.entity)
    return text_rows, node_rows, ents


def _common_width(a: np.ndarray, b: np.ndarray) -> int:
    return min(a.shape[-1], b.shape[-1])


def entity_alignment_correlation(
    model: ModelState, examples: Sequence[McqaExample], seed: int = 0
) -> AlignmentReport:
    """Pearson r between text-side and graph-side rows of the same entity,
    against one randomly mismatched pair per aligned pair.

    When ``d_l != d_g`` both vectors are truncated to their common leading
    width, which is recorded in the report.
    """
    text_rows, node_rows, ents = aligned_representations(model, examples)
    if not text_rows:
        raise EmptyReport("no mention aligns with a subgraph node")
    width = _common_width(text_rows[0], node_rows[0])
    ents = np.asarray(ents)
    rng = np.random.default_rng(seed)
    same, other = [], []
    for i, (t, n) in enumerate(zip(text_rows, node_rows)):
        same.append(pearson_r(t[:width], n[:width]))
        pool = np.flatnonzero(ents != ents[i])
        if pool.size:
            j = int(pool[rng.integers(pool.size)])
            other.append(pearson_r(t[:width], node_rows[j][:width]))
    if not other:
        raise EmptyReport("every aligned pair refers to the same entity; nothing to mismatch")
    return AlignmentReport(
        same_mean=float(np.mean(same)),
        same_std=float(np.std(same)),
        mismatched_mean=float(np.mean(other)),
        mismatched_std=float(np.std(other)),
        n_same=len(same),
        n_mismatched=len(other),
        width=width,
    )


def modality_pca(model: ModelState, examples: Sequence[McqaExample]):
    """Project every E_L and E_G row onto two shared principal components.

    Returns ``(rows, centroid distance)`` where rows are
    ``(modality tag, x, y)`` with tag ``"L"`` (text) or ``"G"`` (graph).
    Vectors are truncated to the common width before stacking.
    """
    text_rows, node_rows, _ = aligned_representations(model, examples)
    if len(text_rows) < 3:
        raise EmptyReport("need at least 3 aligned entities for PCA")
    width = _common_width(text_rows[0], node_rows[0])
    stacked = np.vstack([np.asarray(text_rows)[:, :width], np.asarray(node_rows)[:, :width]])
    coords, _ = pca_project(stacked, n_components=2)
    n = len(text_rows)
    tags = ["L"] * n + ["G"] * n
    rows = [(tag, float(x), float(y)) for tag, (x, y) in zip(tags, coords)]
    return rows, centroid_distance(rows)


def centroid_distance(rows) -> float:
    """Euclidean distance between the mean ``L`` point and the mean ``G`` point."""
    pts = {"L": [], "G": []}
    for tag, x, y in rows:
        pts[tag].append((x, y))
    return float(np.linalg.norm(np.mean(pts["L"], axis=0) - np.mean(pts["G"], axis=0)))


def pca_tsv(rows, header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    buf.write("modality\tx\ty\n")
    for tag, x, y in rows:
        buf.write(f"{tag}\t{x!r}\t{y!r}\n")
    return buf.getvalue()


def attention_report(model: ModelState, ex: McqaExample, kg: KnowledgeGraph) -> AttentionReport:
    """Last-layer graph attention from each entity to its interaction node.

    Injected (irrelevant) nodes and the interaction node itself are left out;
    entities without an edge into the interaction node get weight 0.
    """
    report = AttentionReport(ex.id)
    for item in _inputs(model, ex):
        sg = item.subgraph
        att = encode(model, item).gat_to_interaction
        pairs = []
        for local in sg.entity_positions():
            if sg.labels[local] == IRRELEVANT:
                continue
            surface = kg.entities[sg.node_ids[local]]
            pairs.append((surface, float(att.get(local, 0.0))))
        pairs.sort(key=lambda p: (-p[1], p[0]))
        report.candidates.append(pairs)
    return report


def probe_accuracies(model: ModelState, examples: Sequence[McqaExample]) -> dict[str, float]:
    """Accuracy on the original split and on its operation-A (reasoning) and
    operation-B (parametric) transforms."""
    return {
        "test": evaluate_accuracy(model, examples),
        "test_reason": evaluate_accuracy(model, apply_operation_a(examples)),
        "test_param": evaluate_accuracy(model, apply_operation_b(examples)),
    }
