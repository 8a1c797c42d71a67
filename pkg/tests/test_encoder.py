import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fits.corpus import INT_ID, PAD_ID, build_vocab, corpus_tokens
from fits.encoder import (
    CandidateInput,
    EncoderConfig,
    ModelState,
    Params,
    embed_text,
    encode,
    encode_batch,
    fuse_interaction,
    gnn_layer,
    layout_batch,
    lm_layer,
    pool_text_entities,
)
from fits.errors import ConfigError, SequenceTooLong, SpanError
from fits.kg_store import SubGraph
from fits.numerics.autodiff import Graph
from fits.selfcheck import tiny_world


def _model(seed=0, **kw):
    kg, examples = tiny_world()
    vocab = build_vocab(corpus_tokens(kg, examples))
    cfg = EncoderConfig(len(vocab), len(kg.entities), len(kg.relations), max_len=12, **kw)
    return kg, examples, vocab, ModelState.create(cfg, seed, vocab.tokens)


def _inputs(vocab, ex, c=0):
    return CandidateInput(vocab.encode(ex.merged[c]), ex.mentions[c], ex.subgraphs[c])


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            EncoderConfig(10, 5, 2, d_l=30, heads=4)

    def test_fusion_required(self):
        with pytest.raises(ConfigError):
            EncoderConfig(10, 5, 2, n_fusion=0)

    def test_seeded_init(self):
        a = _model(seed=3)[3].params
        b = _model(seed=3)[3].params
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestEmbedText:
    def test_shape_and_position_term(self):
        *_, m = _model()
        g = Graph()
        ids = np.array([[INT_ID, 7, 7, PAD_ID]])
        X = embed_text(g, Params(g, m.params), ids).value
        assert X.shape == (1, 4, m.config.d_l)
        assert not np.allclose(X[0, 1], X[0, 2])

    def test_zero_token_table(self):
        *_, m = _model()
        params = dict(m.params, tok_emb=np.zeros_like(m.params["tok_emb"]))
        g = Graph()
        X = embed_text(g, Params(g, params), np.array([[3, 5, 6]])).value
        np.testing.assert_array_equal(X[0], params["pos_emb"][:3])

    def test_overflow(self):
        *_, m = _model()
        g = Graph()
        with pytest.raises(SequenceTooLong):
            embed_text(g, Params(g, m.params), np.zeros((1, 13), dtype=np.int64))

    def test_layout_overflow(self):
        kg, examples, vocab, m = _model()
        item = CandidateInput([5] * 12, [], examples[0].subgraphs[0])
        with pytest.raises(SequenceTooLong):
            layout_batch(m.config, [item])


class TestLmLayer:
    def _run(self, m, X, mask):
        g = Graph()
        out, w = lm_layer(g, Params(g, m.params), 0, g.const(X), mask, m.config.heads)
        return out.value, w.value

    def test_single_token(self):
        *_, m = _model()
        X = np.random.default_rng(0).normal(size=(1, 1, m.config.d_l))
        out, w = self._run(m, X, np.ones((1, 1, 1, 1), bool))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(w, 1.0)

    def test_pad_column_zero_weight(self):
        *_, m = _model()
        X = np.random.default_rng(1).normal(size=(1, 4, m.config.d_l))
        mask = np.array([True, True, True, False])[None, None, None, :]
        _, w = self._run(m, X, mask)
        assert np.all(w[..., 3] == 0.0)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000))
    def test_permutation_equivariance(self, seed):
        *_, m = _model()
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(1, 5, m.config.d_l))
        mask = np.array([True] * 4 + [False])[None, None, None, :]
        perm = np.array([0, 2, 1, 3, 4])
        a, _ = self._run(m, X, mask)
        b, _ = self._run(m, X[:, perm], mask)
        np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


class TestGnnLayer:
    def _run(self, m, E, src, dst, rel):
        g = Graph()
        out, alpha = gnn_layer(
            g, Params(g, m.params), 0, g.const(E), np.array(src), np.array(dst), np.array(rel), m.config.gat_heads
        )
        return out.value, alpha.value

    def test_isolated_node_identity(self):
        *_, m = _model()
        E = np.random.default_rng(0).normal(size=(3, m.config.d_g))
        out, _ = self._run(m, E, [0], [1], [0])
        np.testing.assert_array_equal(out[2], E[2])
        np.testing.assert_array_equal(out[0], E[0])

    def test_single_in_edge(self):
        *_, m = _model()
        E = np.random.default_rng(1).normal(size=(2, m.config.d_g))
        _, alpha = self._run(m, E, [0], [1], [1])
        np.testing.assert_array_equal(alpha, 1.0)

    def test_symmetric_in_edges(self):
        *_, m = _model()
        row = np.random.default_rng(2).normal(size=m.config.d_g)
        E = np.stack([row, row, np.zeros_like(row)])
        _, alpha = self._run(m, E, [0, 1], [2, 2], [0, 0])
        np.testing.assert_allclose(alpha, 0.5, atol=1e-15)

    def test_no_edges(self):
        *_, m = _model()
        E = np.ones((2, m.config.d_g))
        out, alpha = self._run(m, E, [], [], [])
        np.testing.assert_array_equal(out, E)
        assert alpha.shape == (0, m.config.gat_heads)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_permutation_equivariance(self, seed):
        *_, m = _model()
        rng = np.random.default_rng(seed)
        n = 5
        E = rng.normal(size=(n, m.config.d_g))
        src = rng.integers(0, n, 8)
        dst = rng.integers(0, n, 8)
        rel = rng.integers(0, 2, 8)
        perm = np.concatenate([[0], 1 + rng.permutation(n - 1)])  # row 0 stays the interaction row
        inv = np.argsort(perm)
        a, _ = self._run(m, E, src, dst, rel)
        b, _ = self._run(m, E[perm], inv[src], inv[dst], rel)
        np.testing.assert_allclose(b, a[perm], atol=1e-12)


class TestFuse:
    def test_widths(self):
        *_, m = _model()
        g = Graph()
        h, e = fuse_interaction(g, Params(g, m.params), 0, g.const(np.ones((2, 32))), g.const(np.ones((2, 16))))
        assert h.shape == (2, 32) and e.shape == (2, 16)

    def test_null_map(self):
        *_, m = _model()
        params = {k: (np.zeros_like(v) if k.startswith("fuse.0.") else v) for k, v in m.params.items()}
        g = Graph()
        h, e = fuse_interaction(g, Params(g, params), 0, g.const(np.ones((1, 32))), g.const(np.ones((1, 16))), residual=False)
        assert not h.value.any() and not e.value.any()

    def test_cross_modal_flow(self):
        *_, m = _model()
        rng = np.random.default_rng(0)
        h0, e0 = rng.normal(size=(1, 32)), rng.normal(size=(1, 16))
        outs = []
        for e in (e0, e0 + 0.1 * rng.normal(size=(1, 16))):
            g = Graph()
            outs.append(fuse_interaction(g, Params(g, m.params), 0, g.const(h0), g.const(e))[0].value)
        assert not np.allclose(outs[0], outs[1])


def _interaction_only():
    return SubGraph((None,), (None,), (None,), (), 0)


class TestEncode:
    def test_minimal_graph(self):
        kg, examples, vocab, m = _model(n_fusion=1)
        out = encode(m, CandidateInput(vocab.encode(["look"]), [], _interaction_only()))
        assert out.E_M.shape == (1, m.config.d_g)
        assert np.all(np.isfinite(out.H_M))

    def test_rows_and_mentions(self):
        kg, examples, vocab, m = _model()
        ex = examples[0]
        out = encode(m, _inputs(vocab, ex))
        assert out.node_ids[0] is None
        assert out.H_M.shape[0] == len(ex.merged[0]) + 1
        assert out.E_L.shape == (len(ex.mentions[0]), m.config.d_l)

    def test_attention_trace_sums_to_one(self):
        kg, examples, vocab, m = _model()
        out = encode(m, _inputs(vocab, examples[0]))
        assert out.gat_to_interaction
        assert sum(out.gat_to_interaction.values()) == pytest.approx(1.0, abs=1e-12)

    def test_no_unimodal_layers(self):
        kg, examples, vocab, m = _model(n_unimodal=0)
        out = encode(m, _inputs(vocab, examples[0]))
        assert np.all(np.isfinite(out.H_M)) and np.all(np.isfinite(out.E_M))

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_finite_on_random_params(self, seed):
        kg, examples, vocab, m = _model(seed=seed)
        rng = np.random.default_rng(seed)
        for k in m.params:
            m.params[k] = m.params[k] + rng.normal(scale=0.5, size=m.params[k].shape)
        out = encode(m, _inputs(vocab, examples[0], 1))
        assert all(np.all(np.isfinite(a)) for a in (out.H_M, out.E_M, out.E_L))

    def test_cross_modal_sensitivity(self):
        kg, examples, vocab, m = _model()
        g = Graph()
        P = Params(g, m.params)
        layout = layout_batch(m.config, [_inputs(vocab, examples[0])])
        enc = encode_batch(g, P, m.config, layout)
        grads = g.backward(g.sum(enc.h_int(g)))
        rows = layout.node_table_idx[layout.entity_rows]
        assert np.abs(grads["ent_emb"][rows]).max() > 0
        # and the other direction: the interaction node reads text
        g = Graph()
        enc = encode_batch(g, Params(g, m.params), m.config, layout)
        grads = g.backward(g.sum(g.gather(enc.E, layout.entity_rows)))
        assert np.abs(grads["tok_emb"]).max() > 0

    def test_batch_blocks_independent(self):
        kg, examples, vocab, m = _model()
        ex = examples[0]
        alone = encode(m, _inputs(vocab, ex, 1))
        g = Graph()
        layout = layout_batch(m.config, [_inputs(vocab, ex, 0), _inputs(vocab, ex, 1)])
        enc = encode_batch(g, Params(g, m.params), m.config, layout)
        L = len(ex.merged[1]) + 1
        np.testing.assert_allclose(enc.H.value[1, :L], alone.H_M, atol=1e-12)


class TestPooling:
    def _H(self):
        return np.arange(24, dtype=float).reshape(6, 4)

    def test_single_token_span(self):
        g = Graph()
        out = pool_text_entities(g, g.const(self._H()), [(2, 3)]).value
        np.testing.assert_array_equal(out[0], self._H()[2])

    def test_equal_rows(self):
        H = np.ones((4, 3)) * 2.5
        g = Graph()
        np.testing.assert_array_equal(pool_text_entities(g, g.const(H), [(0, 2)]).value[0], H[0])

    def test_mean_oracle(self):
        H = np.random.default_rng(0).normal(size=(5, 3))
        g = Graph()
        out = pool_text_entities(g, g.const(H), [(1, 3), (0, 5)]).value
        np.testing.assert_allclose(out[0], (H[1] + H[2]) / 2, atol=1e-15)
        np.testing.assert_allclose(out[1], sum(H) / 5, atol=1e-15)

    def test_empty_span(self):
        g = Graph()
        with pytest.raises(SpanError):
            pool_text_entities(g, g.const(self._H()), [(2, 2)])
