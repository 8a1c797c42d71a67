"""Synthetic MCQA data, vocabulary, MLM masking, KA pair sampling and the
test-reason / test-param dataset transforms."""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fits.errors import GenerationFailed, NoAlignablePair, NothingToMask
from fits.kg_store import KnowledgeGraph, Mention, SubGraph, link_entities, retrieve_subgraph

PAD, MASK, SEP, INT, UNK = "[PAD]", "[MASK]", "[SEP]", "[INT]", "[UNK]"
SPECIALS = (PAD, MASK, SEP, INT, UNK)
PAD_ID, MASK_ID, SEP_ID, INT_ID, UNK_ID = range(5)
# never masked, never scored by MLM
UNMASKABLE = frozenset({PAD_ID, MASK_ID, SEP_ID, INT_ID})

MASK_RATE = 0.15


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the reserved special tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def build_vocab(stream: Iterable[str]) -> Vocab:
    """Ids 0..4 are the specials; the rest by descending frequency, then token."""
    counts = Counter(t for t in stream if t not in SPECIALS)
    if not counts:
        raise ValueError("build_vocab needs a non-empty token stream")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + ordered)


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------


@dataclass
class McqaExample:
    id: str
    context: list[str]
    question: list[str]
    candidates: list[list[str]]
    correct: int
    subgraphs: list[SubGraph]
    merged: list[list[str]] = field(default_factory=list)
    mentions: list[list[Mention]] = field(default_factory=list)

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)

    def answer_offset(self) -> int:
        """Index of the first candidate token in every merged sequence."""
        return len(self.context) + len(self.question) + 2

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "context": " ".join(self.context),
            "question": " ".join(self.question),
            "candidates": [" ".join(c) for c in self.candidates],
            "correct": self.correct,
            "subgraphs": [sg.to_dict() for sg in self.subgraphs],
        }


def merge_tokens(context, question, candidate) -> list[str]:
    return list(context) + [SEP] + list(question) + [SEP] + list(candidate)


def split_mentions(ex: McqaExample, c: int) -> tuple[list[int], list[int]]:
    """Entity ids mentioned in (context + question) and in candidate ``c``."""
    cut = ex.answer_offset()
    q = [m.entity for m in ex.mentions[c] if m.end <= cut]
    a = [m.entity for m in ex.mentions[c] if m.start >= cut]
    return list(dict.fromkeys(q)), list(dict.fromkeys(a))


def make_example(kg, ex_id, context, question, candidates, correct, subgraphs=None,
                 hops=2, max_nodes=16) -> McqaExample:
    if not 0 <= correct < len(candidates):
        raise ValueError(f"correct index {correct} outside {len(candidates)} candidates")
    ex = McqaExample(ex_id, list(context), list(question), [list(c) for c in candidates],
                     correct, [])
    ex.merged = [merge_tokens(context, question, c) for c in ex.candidates]
    ex.mentions = [link_entities(kg, m) for m in ex.merged]
    if subgraphs is None:
        subgraphs = []
        for c in range(len(candidates)):
            q, a = split_mentions(ex, c)
            subgraphs.append(retrieve_subgraph(kg, q, a, hops, max_nodes))
    ex.subgraphs = list(subgraphs)
    return ex


def example_from_dict(kg: KnowledgeGraph, d: dict) -> McqaExample:
    return make_example(
        kg,
        d["id"],
        d["context"].split(),
        d["question"].split(),
        [c.split() for c in d["candidates"]],
        int(d["correct"]),
        [SubGraph.from_dict(s) for s in d["subgraphs"]],
    )


def write_jsonl(examples: Iterable[McqaExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(kg: KnowledgeGraph, path: str | Path) -> list[McqaExample]:
    with open(path, encoding="utf-8") as fh:
        return [example_from_dict(kg, json.loads(line)) for line in fh if line.strip()]


def corpus_tokens(kg: KnowledgeGraph, examples: Iterable[McqaExample]) -> list[str]:
    """Token stream for vocabulary building: every surface, name and merged text."""
    stream = []
    for s in kg.entities:
        stream.extend(s.split())
    stream.extend(kg.relations)
    for ex in examples:
        for m in ex.merged:
            stream.extend(m)
    return stream


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_ADJECTIVES = (
    "red", "blue", "green", "old", "small", "large", "quiet", "bright", "cold", "warm",
    "wild", "soft", "dark", "swift", "round", "tall", "young", "wooden", "silver", "golden",
)
_NOUNS = (
    "fox", "stone", "river", "brush", "tree", "bird", "house", "lamp", "horse", "book",
    "cloud", "ship", "garden", "bridge", "wolf", "apple", "tower", "coin", "mirror", "drum",
    "forest", "bell", "candle", "rope", "shell", "crown", "glass", "field", "door", "key",
)
_RELATIONS = (
    "has_part", "is_a", "used_for", "located_at", "made_of", "causes",
    "desires", "capable_of", "part_of", "related_to", "antonym_of", "precedes",
)
CONTEXT_TEMPLATE = ("use", "the", "graph", "to", "answer")
QUESTION_PREFIX = ("which", "entity", "is", "reached", "from")
QUESTION_JOIN = "via"
QUESTION_END = "?"


@dataclass(frozen=True)
class GenConfig:
    n_entities: int = 60
    n_relations: int = 6
    n_examples: int = 300
    n_candidates: int = 4
    chain_hops: int = 2
    seed: int = 42
    edge_prob: float = 0.45
    hops: int = 2
    max_nodes: int = 16
    max_retries: int = 10


def _entity_names(n: int, rng) -> list[str]:
    names = list(_NOUNS) + [f"{a} {b}" for a in _ADJECTIVES for b in _NOUNS]
    if n > len(names):
        raise GenerationFailed(f"at most {len(names)} entity names available")
    order = rng.permutation(len(names))[:n]
    return [names[i] for i in sorted(order)]


def _relation_names(n: int) -> list[str]:
    return [_RELATIONS[i] if i < len(_RELATIONS) else f"rel_{i}" for i in range(n)]


def _build_graph(cfg: GenConfig, rng) -> KnowledgeGraph:
    kg = KnowledgeGraph()
    for name in _entity_names(cfg.n_entities, rng):
        kg.add_entity(name)
    for name in _relation_names(cfg.n_relations):
        kg.add_relation(name)
    # functional relations: at most one tail per (head, relation), so every
    # relation chain from a source has at most one endpoint
    for h in range(cfg.n_entities):
        for r in range(cfg.n_relations):
            if rng.random() < cfg.edge_prob:
                t = int(rng.integers(cfg.n_entities - 1))
                kg.add_triplet(h, r, t if t < h else t + 1)
    return kg


def _follow(kg: KnowledgeGraph, succ: dict, source: int, chain: Sequence[int]) -> int | None:
    node = source
    for r in chain:
        node = succ.get((node, r))
        if node is None:
            return None
    return node


def _chains(kg: KnowledgeGraph, chain_hops: int) -> list[tuple[int, tuple, int]]:
    succ = {(h, r): t for h, r, t in kg.triplets}
    n_rel = len(kg.relations)
    chains = [()]
    for _ in range(chain_hops):
        chains = [c + (r,) for c in chains for r in range(n_rel)]
    out = []
    for s in range(len(kg.entities)):
        for chain in chains:
            end = _follow(kg, succ, s, chain)
            if end is not None and end != s:
                out.append((s, chain, end))
    return out


def generate_synthetic_dataset(cfg: GenConfig = GenConfig()):
    """Random functional KG plus relation-chain questions with unique answers.

    Returns ``(kg, {"train": [...], "dev": [...], "test": [...]})`` split
    80/10/10.  Each question is used once, so splits never share a question.
    """
    if cfg.n_entities < 4 * cfg.n_candidates:
        raise ValueError("n_entities must be >= 4 * n_candidates")
    if cfg.n_relations < 2:
        raise ValueError("n_relations must be >= 2")
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([cfg.seed, attempt])
        kg = _build_graph(cfg, rng)
        chains = _chains(kg, cfg.chain_hops)
        if len(chains) >= cfg.n_examples:
            break
    else:
        raise GenerationFailed(
            f"only {len(chains)} unique-answer questions for {cfg.n_examples} examples"
        )
    order = rng.permutation(len(chains))[: cfg.n_examples]
    examples = []
    for idx, ci in enumerate(order):
        source, chain, answer = chains[ci]
        ex_rng = np.random.default_rng([cfg.seed, 1_000_003, idx])
        # the source never "satisfies" its own chain, and the generator never
        # asks a question whose answer is the source
        pool = [e for e in range(cfg.n_entities) if e not in (answer, source)]
        distract = ex_rng.choice(len(pool), size=cfg.n_candidates - 1, replace=False)
        ents = [pool[int(j)] for j in distract]
        correct = int(ex_rng.integers(cfg.n_candidates))
        ents.insert(correct, answer)
        question = (
            list(QUESTION_PREFIX)
            + kg.entities[source].split()
            + [QUESTION_JOIN]
            + [kg.relations[r] for r in chain]
            + [QUESTION_END]
        )
        examples.append(
            make_example(
                kg,
                f"syn-{cfg.seed}-{idx:05d}",
                CONTEXT_TEMPLATE,
                question,
                [kg.entities[e].split() for e in ents],
                correct,
                hops=cfg.hops,
                max_nodes=cfg.max_nodes,
            )
        )
    n_train = int(round(0.8 * len(examples)))
    n_dev = int(round(0.1 * len(examples)))
    splits = {
        "train": examples[:n_train],
        "dev": examples[n_train : n_train + n_dev],
        "test": examples[n_train + n_dev :],
    }
    return kg, splits


# ---------------------------------------------------------------------------
# post-training sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskedBatch:
    input_ids: tuple
    positions: tuple
    targets: tuple


def mask_count(maskable: int) -> int:
    return max(1, int(math.floor(MASK_RATE * maskable + 0.5)))


def mask_tokens(ids: Sequence[int], seed) -> MaskedBatch:
    """Replace ``max(1, round(0.15 * maskable))`` uniformly chosen tokens by MASK."""
    maskable = [i for i, t in enumerate(ids) if t not in UNMASKABLE]
    if not maskable:
        raise NothingToMask("no maskable token in sequence")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(maskable), size=mask_count(len(maskable)), replace=False)
    positions = sorted(maskable[int(j)] for j in picked)
    out = list(ids)
    for p in positions:
        out[p] = MASK_ID
    return MaskedBatch(tuple(out), tuple(positions), tuple(ids[p] for p in positions))


@dataclass(frozen=True)
class EntityPairBatch:
    """``pairs[i] = (mention index, subgraph local node index)``; ``labels[i]`` in {0, 1}."""

    pairs: tuple
    labels: tuple


def sample_entity_pairs(mentions: Sequence[Mention], subgraph: SubGraph, k: int, seed) -> EntityPairBatch:
    """k positive (same entity) pairs, each followed by one negative that pairs
    the same text entity with a different, uniformly drawn kg node."""
    if k < 1:
        raise ValueError("k must be >= 1")
    nodes = subgraph.entity_positions()
    aligned = []
    for mi, m in enumerate(mentions):
        j = subgraph.local_index(m.entity)
        if j is not None:
            aligned.append((mi, j))
    if not aligned or len(nodes) < 2:
        raise NoAlignablePair("no mention aligns with a subgraph node that has a negative")
    rng = np.random.default_rng(seed)
    if len(aligned) >= k:
        chosen = [aligned[int(i)] for i in rng.choice(len(aligned), size=k, replace=False)]
    else:
        extra = rng.choice(len(aligned), size=k - len(aligned), replace=True)
        chosen = aligned + [aligned[int(i)] for i in extra]
    pairs, labels = [], []
    for mi, j in chosen:
        others = [n for n in nodes if n != j]
        neg = others[int(rng.integers(len(others)))]
        pairs += [(mi, j), (mi, neg)]
        labels += [1, 0]
    return EntityPairBatch(tuple(pairs), tuple(labels))


# ---------------------------------------------------------------------------
# operations A and B
# ---------------------------------------------------------------------------


def apply_operation_a(dataset: Sequence[McqaExample]) -> list[McqaExample]:
    """Every candidate text becomes the correct answer; subgraphs untouched."""
    out = []
    for ex in dataset:
        c = ex.correct
        n = ex.n_candidates
        out.append(
            dataclasses.replace(
                ex,
                candidates=[list(ex.candidates[c]) for _ in range(n)],
                merged=[list(ex.merged[c]) for _ in range(n)],
                mentions=[list(ex.mentions[c]) for _ in range(n)],
                subgraphs=list(ex.subgraphs),
            )
        )
    return out


def apply_operation_b(dataset: Sequence[McqaExample]) -> list[McqaExample]:
    """Every candidate subgraph becomes the correct answer's; texts untouched."""
    out = []
    for ex in dataset:
        sg = ex.subgraphs[ex.correct]
        out.append(
            dataclasses.replace(
                ex,
                candidates=[list(c) for c in ex.candidates],
                merged=[list(m) for m in ex.merged],
                mentions=[list(m) for m in ex.mentions],
                subgraphs=[sg] * ex.n_candidates,
            )
        )
    return out
