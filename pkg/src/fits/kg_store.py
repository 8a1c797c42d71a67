"""Toy knowledge graph, entity linking and per-candidate subgraph retrieval."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fits.errors import DuplicateTriplet, IdNotFound, NotEnoughIrrelevant

QUESTION_LINKED = 1
ANSWER_LINKED = 2
NEIGHBOR = 3
IRRELEVANT = 4

# relation id used on edges between the interaction node and entity nodes
INTERACTION_RELATION = -1


@dataclass
class KnowledgeGraph:
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)
    triplets: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self._surface_index: dict[str, int] = {}
        self._relation_index: dict[str, int] = {}
        self._triplet_set: set[tuple[int, int, int]] = set()
        self._neighbors: list[set[int]] = []
        self._degree: list[int] = []
        self._max_surface_len = 1
        ents, rels, trips = self.entities, self.relations, self.triplets
        self.entities, self.relations, self.triplets = [], [], []
        for s in ents:
            self.add_entity(s)
        for r in rels:
            self.add_relation(r)
        for h, r, t in trips:
            self.add_triplet(h, r, t)

    # -- construction ------------------------------------------------------

    def add_entity(self, surface: str) -> int:
        key = surface.casefold()
        if key in self._surface_index:
            raise ValueError(f"entity surface {surface!r} already registered")
        eid = len(self.entities)
        self.entities.append(surface)
        self._surface_index[key] = eid
        self._neighbors.append(set())
        self._degree.append(0)
        self._max_surface_len = max(self._max_surface_len, len(surface.split()))
        return eid

    def add_relation(self, name: str) -> int:
        if name in self._relation_index:
            raise ValueError(f"relation {name!r} already registered")
        rid = len(self.relations)
        self.relations.append(name)
        self._relation_index[name] = rid
        return rid

    def add_triplet(self, head: int, rel: int, tail: int) -> "KnowledgeGraph":
        for eid in (head, tail):
            self._check_entity(eid)
        if not 0 <= rel < len(self.relations):
            raise IdNotFound(f"relation {rel}")
        trip = (head, rel, tail)
        if trip in self._triplet_set:
            raise DuplicateTriplet(str(trip))
        self.triplets.append(trip)
        self._triplet_set.add(trip)
        self._neighbors[head].add(tail)
        self._neighbors[tail].add(head)
        self._degree[head] += 1
        self._degree[tail] += 1
        return self

    # -- lookups -----------------------------------------------------------

    def _check_entity(self, eid: int):
        if not 0 <= eid < len(self.entities):
            raise IdNotFound(f"entity {eid}")

    def entity_id(self, surface: str) -> int:
        try:
            return self._surface_index[surface.casefold()]
        except KeyError:
            raise IdNotFound(surface) from None

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_index[name]
        except KeyError:
            raise IdNotFound(name) from None

    def lookup_surface(self, text: str) -> int | None:
        return self._surface_index.get(text.casefold())

    def degree(self, eid: int) -> int:
        self._check_entity(eid)
        return self._degree[eid]

    def neighbors(self, eid: int) -> set[int]:
        self._check_entity(eid)
        return self._neighbors[eid]

    def has_triplet(self, head: int, rel: int, tail: int) -> bool:
        return (head, rel, tail) in self._triplet_set

    @property
    def max_surface_len(self) -> int:
        return self._max_surface_len

    def hop_distances(self, sources: Iterable[int], hops: int) -> dict[int, int]:
        """Undirected BFS distance (<= hops) from the nearest source."""
        dist: dict[int, int] = {}
        frontier = deque()
        for s in sources:
            self._check_entity(s)
            if s not in dist:
                dist[s] = 0
                frontier.append(s)
        while frontier:
            u = frontier.popleft()
            if dist[u] == hops:
                continue
            for v in sorted(self._neighbors[u]):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    frontier.append(v)
        return dist


def add_triplet(kg: KnowledgeGraph, head: int, rel: int, tail: int) -> KnowledgeGraph:
    return kg.add_triplet(head, rel, tail)


def load_tsv(
    path: str | Path,
    entities: Sequence[str] = (),
    relations: Sequence[str] = (),
) -> KnowledgeGraph:
    """Read ``head<TAB>relation<TAB>tail`` lines, registering names on first sight.

    ``entities``/``relations`` are registered up front, in order, so a graph
    written with :func:`write_tsv` plus its name lists reloads with the same
    ids (and keeps isolated entities).
    """
    kg = KnowledgeGraph()
    for name in entities:
        kg.add_entity(name)
    for name in relations:
        kg.add_relation(name)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            h, r, t = parts
            hid = kg.lookup_surface(h)
            if hid is None:
                hid = kg.add_entity(h)
            try:
                rid = kg.relation_id(r)
            except IdNotFound:
                rid = kg.add_relation(r)
            tid = kg.lookup_surface(t)
            if tid is None:
                tid = kg.add_entity(t)
            kg.add_triplet(hid, rid, tid)
    return kg


def write_tsv(kg: KnowledgeGraph, path: str | Path) -> None:
    """Write every triplet; isolated entities are not representable in the format."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for h, r, t in kg.triplets:
            fh.write(f"{kg.entities[h]}\t{kg.relations[r]}\t{kg.entities[t]}\n")


# ---------------------------------------------------------------------------
# entity linking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    entity: int


def link_entities(kg: KnowledgeGraph, tokens: Sequence[str]) -> list[Mention]:
    """Greedy left-to-right, longest-match, case-folded surface matching."""
    if not tokens:
        raise ValueError("link_entities needs at least one token")
    mentions = []
    i = 0
    n = len(tokens)
    while i < n:
        for width in range(min(kg.max_surface_len, n - i), 0, -1):
            eid = kg.lookup_surface(" ".join(tokens[i : i + width]))
            if eid is not None:
                mentions.append(Mention(i, i + width, eid))
                i += width
                break
        else:
            i += 1
    return mentions


# ---------------------------------------------------------------------------
# subgraphs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubGraph:
    """Retrieved neighbourhood for one Q-A pair.

    ``node_ids``/``labels``/``relevance`` are parallel; the interaction node
    sits at ``interaction_node_index`` with ``None`` in all three.  Edges are
    ``(local_head, relation_id, local_tail)``; interaction edges use
    :data:`INTERACTION_RELATION`.
    """

    node_ids: tuple
    labels: tuple
    relevance: tuple
    edges: tuple
    interaction_node_index: int
    question_entities: tuple = ()
    answer_entities: tuple = ()
    hops: int = 1

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    def entity_positions(self) -> list[int]:
        return [i for i, e in enumerate(self.node_ids) if e is not None]

    def kg_edges(self) -> list[tuple[int, int, int]]:
        return [e for e in self.edges if e[1] != INTERACTION_RELATION]

    def local_index(self, entity: int) -> int | None:
        try:
            return self.node_ids.index(entity)
        except ValueError:
            return None

    def to_dict(self) -> dict:
        """JSONL form: entity nodes only, kg edges in entity-node indices."""
        pos = self.entity_positions()
        remap = {p: i for i, p in enumerate(pos)}
        return {
            "nodes": [
                {"entity": self.node_ids[p], "label": self.labels[p], "relevance": self.relevance[p]}
                for p in pos
            ],
            "edges": [[remap[h], r, remap[t]] for h, r, t in self.kg_edges()],
            "interaction": self.interaction_node_index,
            "question_entities": list(self.question_entities),
            "answer_entities": list(self.answer_entities),
            "hops": self.hops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubGraph":
        nodes = d["nodes"]
        inter = d.get("interaction", len(nodes))
        node_ids = [n["entity"] for n in nodes]
        labels = [n["label"] for n in nodes]
        relevance = [float(n.get("relevance", 0.0)) for n in nodes]
        node_ids.insert(inter, None)
        labels.insert(inter, None)
        relevance.insert(inter, None)

        def local(i):
            return i if i < inter else i + 1

        edges = [(local(h), r, local(t)) for h, r, t in d["edges"]]
        edges += _interaction_edges(labels, inter)
        return cls(
            tuple(node_ids),
            tuple(labels),
            tuple(relevance),
            tuple(edges),
            inter,
            tuple(d.get("question_entities", ())),
            tuple(d.get("answer_entities", ())),
            int(d.get("hops", 1)),
        )

    def digest(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _interaction_edges(labels, inter: int) -> list[tuple[int, int, int]]:
    out = []
    for i, lab in enumerate(labels):
        if lab in (QUESTION_LINKED, ANSWER_LINKED, IRRELEVANT):
            out.append((inter, INTERACTION_RELATION, i))
            out.append((i, INTERACTION_RELATION, inter))
    return out


def relevance_score(
    kg: KnowledgeGraph, entity: int, linked: Iterable[int] = (), hop_distance: int = 0
) -> float:
    """Structural stand-in for an LM relevance scorer.

    ``2**-hop + 0.1 * ln(1 + degree)``; ``linked`` is accepted for interface
    parity and does not enter the score.
    """
    if hop_distance < 0:
        raise ValueError("hop_distance must be >= 0")
    return 2.0 ** (-hop_distance) + 0.1 * math.log1p(kg.degree(entity))


def _labels_for(kg, node_ids, q_ids, a_ids, previous=None) -> list:
    q, a = set(q_ids), set(a_ids)
    out = []
    for i, e in enumerate(node_ids):
        if e is None:
            out.append(None)
        elif previous is not None and previous[i] == IRRELEVANT:
            out.append(IRRELEVANT)
        elif e in a:
            out.append(ANSWER_LINKED)
        elif e in q:
            out.append(QUESTION_LINKED)
        else:
            nb = kg.neighbors(e)
            if nb & a:
                out.append(ANSWER_LINKED)
            elif nb & q:
                out.append(QUESTION_LINKED)
            else:
                out.append(NEIGHBOR)
    return out


def label_sources(
    subgraph: SubGraph, kg: KnowledgeGraph, question_ids: Iterable[int], answer_ids: Iterable[int]
) -> tuple:
    """Source class per node (``None`` for the interaction node).

    Mentioned entities take their own class; other nodes are classed by a
    direct kg edge to a mention.  Answer beats question when both apply;
    injected nodes keep IRRELEVANT.
    """
    return tuple(_labels_for(kg, subgraph.node_ids, question_ids, answer_ids, subgraph.labels))


def retrieve_subgraph(
    kg: KnowledgeGraph,
    question_ids: Sequence[int],
    answer_ids: Sequence[int],
    hops: int = 2,
    max_nodes: int = 12,
) -> SubGraph:
    """BFS neighbourhood of all mentions, cut to the ``max_nodes`` most relevant.

    ``max_nodes`` counts the interaction node.  Mentions are always kept; the
    rest are ranked by (relevance desc, entity id asc).
    """
    if hops < 1:
        raise ValueError("hops must be >= 1")
    mentioned = list(dict.fromkeys(list(question_ids) + list(answer_ids)))
    if max_nodes < len(mentioned) + 1:
        raise ValueError(f"max_nodes={max_nodes} cannot hold {len(mentioned)} mentions")
    dist = kg.hop_distances(mentioned, hops)
    score = {e: relevance_score(kg, e, mentioned, d) for e, d in dist.items()}
    rest = sorted((e for e in dist if e not in set(mentioned)), key=lambda e: (-score[e], e))
    kept = mentioned + rest[: max_nodes - 1 - len(mentioned)]
    local = {e: i for i, e in enumerate(kept)}
    edges = [
        (local[h], r, local[t]) for h, r, t in kg.triplets if h in local and t in local
    ]
    node_ids = kept + [None]
    inter = len(kept)
    labels = _labels_for(kg, node_ids, question_ids, answer_ids)
    edges += _interaction_edges(labels, inter)
    return SubGraph(
        tuple(node_ids),
        tuple(labels),
        tuple(score[e] for e in kept) + (None,),
        tuple(edges),
        inter,
        tuple(question_ids),
        tuple(answer_ids),
        hops,
    )


def inject_irrelevant(subgraph: SubGraph, kg: KnowledgeGraph, k_irr: int, seed) -> SubGraph:
    """Append ``k_irr`` entities from outside the mentions' neighbourhood.

    Injected nodes get IRRELEVANT, no kg edges, and a two-way edge to the
    interaction node.
    """
    if k_irr == 0:
        return subgraph
    if k_irr < 0:
        raise ValueError("k_irr must be >= 0")
    mentioned = list(subgraph.question_entities) + list(subgraph.answer_entities)
    near = set(kg.hop_distances(mentioned, subgraph.hops)) if mentioned else set()
    near.update(e for e in subgraph.node_ids if e is not None)
    pool = [e for e in range(len(kg.entities)) if e not in near]
    if len(pool) < k_irr:
        raise NotEnoughIrrelevant(f"need {k_irr} irrelevant entities, only {len(pool)} available")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool), size=k_irr, replace=False)
    node_ids = list(subgraph.node_ids)
    labels = list(subgraph.labels)
    relevance = list(subgraph.relevance)
    edges = list(subgraph.edges)
    inter = subgraph.interaction_node_index
    for j in picked:
        idx = len(node_ids)
        node_ids.append(pool[int(j)])
        labels.append(IRRELEVANT)
        relevance.append(0.0)
        edges.append((inter, INTERACTION_RELATION, idx))
        edges.append((idx, INTERACTION_RELATION, inter))
    return dataclasses.replace(
        subgraph,
        node_ids=tuple(node_ids),
        labels=tuple(labels),
        relevance=tuple(relevance),
        edges=tuple(edges),
    )
