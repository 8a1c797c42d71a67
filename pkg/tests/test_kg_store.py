import math
from collections import deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fits.errors import DuplicateTriplet, IdNotFound, NotEnoughIrrelevant
from fits.kg_store import (
    ANSWER_LINKED,
    INTERACTION_RELATION,
    IRRELEVANT,
    NEIGHBOR,
    QUESTION_LINKED,
    KnowledgeGraph,
    Mention,
    SubGraph,
    add_triplet,
    inject_irrelevant,
    label_sources,
    link_entities,
    load_tsv,
    relevance_score,
    retrieve_subgraph,
    write_tsv,
)


def make_kg(n_entities, triplets, n_relations=2):
    kg = KnowledgeGraph()
    for i in range(n_entities):
        kg.add_entity(f"e{i}")
    for r in range(n_relations):
        kg.add_relation(f"r{r}")
    for h, r, t in triplets:
        kg.add_triplet(h, r, t)
    return kg


def brute_hops(kg, sources, hops):
    """Plain BFS over the undirected triplet list."""
    adj = {i: set() for i in range(len(kg.entities))}
    for h, _, t in kg.triplets:
        adj[h].add(t)
        adj[t].add(h)
    dist = {s: 0 for s in sources}
    queue = deque(sources)
    while queue:
        u = queue.popleft()
        if dist[u] == hops:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


@st.composite
def random_kgs(draw):
    n = draw(st.integers(3, 12))
    pairs = draw(
        st.lists(
            st.tuples(st.integers(0, n - 1), st.integers(0, 1), st.integers(0, n - 1)),
            max_size=25,
            unique=True,
        )
    )
    kg = make_kg(n, [(h, r, t) for h, r, t in pairs if h != t])
    q = draw(st.lists(st.integers(0, n - 1), min_size=0, max_size=2, unique=True))
    a = draw(st.lists(st.integers(0, n - 1).filter(lambda x: x not in q), max_size=1, unique=True))
    return kg, q, a


class TestKnowledgeGraph:
    def test_empty_store_unknown_id(self):
        with pytest.raises(IdNotFound):
            add_triplet(KnowledgeGraph(), 0, 0, 1)

    def test_single_insert(self):
        kg = make_kg(2, [], n_relations=1)
        add_triplet(kg, 0, 0, 1)
        assert len(kg.triplets) == 1

    def test_duplicate(self):
        kg = make_kg(2, [(0, 0, 1)], n_relations=1)
        with pytest.raises(DuplicateTriplet):
            add_triplet(kg, 0, 0, 1)

    def test_casefolded_surface_unique(self):
        kg = KnowledgeGraph()
        kg.add_entity("Round Brush")
        with pytest.raises(ValueError):
            kg.add_entity("round brush")

    def test_degree_counts_both_directions(self):
        kg = make_kg(3, [(0, 0, 1), (2, 1, 0)])
        assert kg.degree(0) == 2
        assert kg.degree(1) == 1

    def test_id_not_found_is_key_error(self):
        with pytest.raises(KeyError):
            make_kg(1, []).entity_id("nope")

    def test_tsv_round_trip_with_name_lists(self, tmp_path):
        kg = make_kg(5, [(3, 1, 0), (1, 0, 2)])
        write_tsv(kg, tmp_path / "kg.tsv")
        plain = load_tsv(tmp_path / "kg.tsv")
        # first-appearance order: e3, e0, e1, e2; e4 is isolated and lost
        assert plain.entities == ["e3", "e0", "e1", "e2"]
        full = load_tsv(tmp_path / "kg.tsv", kg.entities, kg.relations)
        assert full.entities == kg.entities
        assert full.triplets == kg.triplets

    def test_tsv_bad_line(self, tmp_path):
        (tmp_path / "bad.tsv").write_text("a\tb\n")
        with pytest.raises(ValueError):
            load_tsv(tmp_path / "bad.tsv")


class TestLinking:
    def test_exact_surface(self):
        kg = KnowledgeGraph()
        kg.add_entity("round brush")
        assert link_entities(kg, ["round", "brush"]) == [Mention(0, 2, 0)]

    def test_no_match(self):
        kg = KnowledgeGraph()
        kg.add_entity("cat")
        assert link_entities(kg, ["dog", "bone"]) == []

    def test_longest_wins(self):
        kg = KnowledgeGraph()
        kg.add_entity("brush")
        kg.add_entity("round brush")
        # all matchings covering "round brush": {(0,2)} or {(1,2)}; greedy picks the 2-gram
        assert link_entities(kg, ["a", "Round", "BRUSH"]) == [Mention(1, 3, 1)]

    def test_mentions_do_not_overlap(self):
        kg = KnowledgeGraph()
        for s in ("a b", "b c", "c"):
            kg.add_entity(s)
        ms = link_entities(kg, ["a", "b", "c"])
        assert [(m.start, m.end) for m in ms] == [(0, 2), (2, 3)]


class TestRelevance:
    def test_hop0_degree0(self):
        assert relevance_score(make_kg(1, []), 0, [], 0) == 1.0

    def test_hop1_degree0(self):
        assert relevance_score(make_kg(1, []), 0, [], 1) == 0.5

    def test_hop2_degree6(self):
        kg = make_kg(7, [(0, 0, i) for i in range(1, 7)])
        assert relevance_score(kg, 0, [], 2) == pytest.approx(0.25 + 0.1 * math.log(7))
        assert relevance_score(kg, 0, [], 2) == pytest.approx(0.4446, abs=1e-4)

    def test_unknown_entity(self):
        with pytest.raises(IdNotFound):
            relevance_score(make_kg(1, []), 5, [], 0)


class TestRetrieval:
    def test_two_node_graph(self):
        kg = make_kg(2, [(0, 0, 1)])
        sg = retrieve_subgraph(kg, [0], [1], hops=1, max_nodes=5)
        assert sg.node_ids[:2] == (0, 1)
        assert sg.labels[:2] == (QUESTION_LINKED, ANSWER_LINKED)
        assert len(sg.kg_edges()) == 1
        assert len(sg.edges) - len(sg.kg_edges()) == 4

    def test_no_mentions(self):
        sg = retrieve_subgraph(make_kg(3, [(0, 0, 1)]), [], [], hops=1)
        assert sg.node_ids == (None,)
        assert sg.edges == ()

    def test_hop_limit(self):
        kg = make_kg(4, [(0, 0, 2), (2, 0, 3)])
        sg = retrieve_subgraph(kg, [0], [], hops=1)
        assert 3 not in sg.node_ids
        assert 2 in sg.node_ids

    def test_max_nodes_counts_interaction(self):
        kg = make_kg(8, [(0, 0, i) for i in range(1, 8)])
        assert retrieve_subgraph(kg, [0], [], hops=1, max_nodes=4).num_nodes == 4

    @settings(max_examples=60, deadline=None)
    @given(random_kgs(), st.integers(1, 3))
    def test_nodes_are_within_bfs_and_invariants_hold(self, world, hops):
        kg, q, a = world
        max_nodes = len(q) + len(a) + 4
        sg = retrieve_subgraph(kg, q, a, hops=hops, max_nodes=max_nodes)
        dist = brute_hops(kg, q + a, hops)
        ents = [e for e in sg.node_ids if e is not None]
        assert set(ents) <= set(dist)
        assert set(q + a) <= set(ents)
        assert len(set(ents)) == len(ents)
        assert sg.node_ids.count(None) == 1
        assert sg.num_nodes <= max_nodes
        for h, _, t in sg.edges:
            assert 0 <= h < sg.num_nodes and 0 <= t < sg.num_nodes
        # kg edges among kept nodes, all of them
        kept = set(ents)
        expect = {(h, r, t) for h, r, t in kg.triplets if h in kept and t in kept}
        got = {(sg.node_ids[h], r, sg.node_ids[t]) for h, r, t in sg.kg_edges()}
        assert got == expect
        # interaction node touches exactly the label-1/2 nodes
        inter = sg.interaction_node_index
        touched = {t for h, r, t in sg.edges if h == inter and r == INTERACTION_RELATION}
        assert touched == {i for i, lab in enumerate(sg.labels) if lab in (1, 2)}

    @settings(max_examples=60, deadline=None)
    @given(random_kgs(), st.integers(0, 6))
    def test_monotone_in_max_nodes(self, world, extra):
        kg, q, a = world
        base = len(q) + len(a) + 1
        small = retrieve_subgraph(kg, q, a, hops=2, max_nodes=base + extra)
        large = retrieve_subgraph(kg, q, a, hops=2, max_nodes=base + extra + 1)
        assert {e for e in small.node_ids if e is not None} <= set(large.node_ids)

    @settings(max_examples=30, deadline=None)
    @given(random_kgs())
    def test_deterministic(self, world):
        kg, q, a = world
        assert retrieve_subgraph(kg, q, a).digest() == retrieve_subgraph(kg, q, a).digest()

    def test_dict_round_trip(self):
        kg = make_kg(5, [(0, 0, 1), (1, 1, 2), (2, 0, 3)])
        sg = inject_irrelevant(retrieve_subgraph(kg, [0], [2], hops=1), kg, 1, 0)
        back = SubGraph.from_dict(sg.to_dict())
        assert back.node_ids == sg.node_ids
        assert back.labels == sg.labels
        assert sorted(back.edges) == sorted(sg.edges)


class TestLabels:
    def test_answer_mention(self):
        kg = make_kg(3, [(0, 0, 1)])
        sg = retrieve_subgraph(kg, [0], [1], hops=1)
        assert sg.labels[sg.local_index(1)] == ANSWER_LINKED

    def test_two_hop_is_neighbor(self):
        kg = make_kg(3, [(0, 0, 1), (1, 0, 2)])
        sg = retrieve_subgraph(kg, [0], [], hops=2)
        assert sg.labels[sg.local_index(2)] == NEIGHBOR
        assert sg.labels[sg.local_index(1)] == QUESTION_LINKED

    def test_both_linked_answer_wins(self):
        # node 2 is adjacent to question mention 0 and answer mention 1
        kg = make_kg(3, [(0, 0, 2), (2, 1, 1)])
        sg = retrieve_subgraph(kg, [0], [1], hops=1)
        assert sg.labels[sg.local_index(2)] == ANSWER_LINKED

    def test_relabel_matches_retrieval(self):
        kg = make_kg(4, [(0, 0, 2), (2, 1, 3)])
        sg = retrieve_subgraph(kg, [0], [1], hops=2)
        assert label_sources(sg, kg, [0], [1]) == sg.labels

    @settings(max_examples=40, deadline=None)
    @given(random_kgs())
    def test_label_partition(self, world):
        kg, q, a = world
        sg = retrieve_subgraph(kg, q, a, hops=2, max_nodes=20)
        for e, lab in zip(sg.node_ids, sg.labels):
            assert (lab is None) == (e is None)
            if e is not None:
                assert lab in (1, 2, 3)


class TestInjection:
    def setup_method(self):
        # 10 entities; mention 0 with neighbours 1, 2 -> 3 relevant nodes
        self.kg = make_kg(10, [(0, 0, 1), (0, 1, 2), (5, 0, 6)])
        self.sg = retrieve_subgraph(self.kg, [0], [], hops=1)

    def test_zero_is_identity(self):
        assert inject_irrelevant(self.sg, self.kg, 0, 1) is self.sg

    def test_two_injected(self):
        out = inject_irrelevant(self.sg, self.kg, 2, 7)
        assert out.num_nodes == self.sg.num_nodes + 2
        new = out.node_ids[self.sg.num_nodes:]
        assert all(lab == IRRELEVANT for lab in out.labels[self.sg.num_nodes:])
        near = set(brute_hops(self.kg, [0], 1))
        assert not set(new) & near
        # only interaction edges to the injected nodes
        idx = set(range(self.sg.num_nodes, out.num_nodes))
        for h, r, t in out.edges:
            if h in idx or t in idx:
                assert r == INTERACTION_RELATION
        inter = out.interaction_node_index
        for i in idx:
            assert (inter, INTERACTION_RELATION, i) in out.edges
            assert (i, INTERACTION_RELATION, inter) in out.edges

    def test_exhaustion(self):
        with pytest.raises(NotEnoughIrrelevant):
            inject_irrelevant(self.sg, self.kg, 8, 0)

    def test_deterministic(self):
        a = inject_irrelevant(self.sg, self.kg, 3, 11)
        b = inject_irrelevant(self.sg, self.kg, 3, 11)
        assert a == b

    def test_label4_are_exactly_injected(self):
        out = inject_irrelevant(self.sg, self.kg, 3, 2)
        injected = [i for i, lab in enumerate(out.labels) if lab == IRRELEVANT]
        assert injected == list(range(self.sg.num_nodes, out.num_nodes))
