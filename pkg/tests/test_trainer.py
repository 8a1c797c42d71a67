import warnings
from pathlib import Path

import numpy as np
import pytest

from fits.config import TrainConfig, build_config, dump_config, load_config, parse_pairs
from fits.corpus import GenConfig, build_vocab, corpus_tokens, generate_synthetic_dataset
from fits.errors import CheckpointError, ConfigError, StageError
from fits.numerics.autodiff import Graph
from fits.trainer import (
    evaluate_accuracy,
    fine_tune,
    finetune_batch_loss,
    load_checkpoint,
    make_model,
    new_optimizer,
    post_batch_loss,
    post_train,
    predict_logits,
    save_checkpoint,
)
from fits.numerics.optim import adam_step

SMALL = {"d_l": 16, "d_g": 8, "ff": 32, "qa_hidden": 16}


@pytest.fixture(scope="module")
def world():
    kg, splits = generate_synthetic_dataset(GenConfig(n_examples=30, seed=11))
    vocab = build_vocab(corpus_tokens(kg, [e for s in splits.values() for e in s]))
    return kg, splits, vocab


def _cfg(**kw):
    base = dict(epochs=2, seed=5, model=dict(SMALL))
    base.update(kw)
    return TrainConfig(**base)


def _fresh(world, cfg):
    kg, _, vocab = world
    return make_model(cfg, vocab, kg)


def _params_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestPostTrain:
    def test_nothing_to_optimise(self, world):
        cfg = _cfg(stage="POST", loss_mlm=False, loss_ka=False)
        with pytest.raises(ConfigError):
            post_train(_fresh(world, cfg), world[1]["train"], cfg)

    def test_empty_split(self, world):
        cfg = _cfg(stage="POST")
        with pytest.raises(ValueError):
            post_train(_fresh(world, cfg), [], cfg)

    def test_deterministic(self, world):
        cfg = _cfg(stage="POST", epochs=1)
        train = world[1]["train"][:1]
        runs = [post_train(_fresh(world, cfg), train, cfg) for _ in range(2)]
        assert runs[0][2] == runs[1][2]
        assert _params_equal(runs[0][0].params, runs[1][0].params)

    def test_gold_labels_unused(self, world):
        cfg = _cfg(stage="POST", epochs=1)
        train = world[1]["train"][:4]
        relabeled = [type(e)(**{**e.__dict__, "correct": (e.correct + 1) % e.n_candidates}) for e in train]
        a = post_train(_fresh(world, cfg), train, cfg)[0]
        b = post_train(_fresh(world, cfg), relabeled, cfg)[0]
        assert _params_equal(a.params, b.params)

    def test_descent_over_epochs(self, world):
        cfg = _cfg(stage="POST", epochs=50, lr=3e-3)
        train = world[1]["train"][:20]
        _, _, hist = post_train(_fresh(world, cfg), train, cfg)
        assert hist[-1]["loss"] < hist[0]["loss"]
        assert hist[-1]["stage"] == "POST"

    def test_loss_is_sum_of_terms(self, world):
        cfg = _cfg(stage="POST")
        model = _fresh(world, cfg)
        g = Graph()
        out = post_batch_loss(g, model, list(enumerate(world[1]["train"][:3])), cfg, 1)
        assert abs(float(out.total.value) - float(out.ka.value) - float(out.mlm.value)) < 1e-12


class TestFineTune:
    def test_baseline_has_only_sup(self, world):
        cfg = _cfg(loss_ksd=False, loss_kbr=False)
        g = Graph()
        fb = finetune_batch_loss(g, _fresh(world, cfg), list(enumerate(world[1]["train"][:2])), cfg, 1, world[0])
        assert fb.ksd is None and fb.kbr is None
        assert float(fb.total.value) == float(fb.sup.value)

    def test_loss_is_sum_of_terms(self, world):
        cfg = _cfg()
        g = Graph()
        fb = finetune_batch_loss(g, _fresh(world, cfg), list(enumerate(world[1]["train"][:3])), cfg, 1, world[0])
        parts = float(fb.sup.value) + float(fb.ksd.value) + float(fb.kbr.value)
        assert abs(float(fb.total.value) - parts) < 1e-12

    def test_injection_needs_kg(self, world):
        cfg = _cfg()
        with pytest.raises(ValueError):
            finetune_batch_loss(Graph(), _fresh(world, cfg), list(enumerate(world[1]["train"][:1])), cfg, 1, None)

    def test_deterministic_dev_trajectory(self, world):
        kg, splits, _ = world
        cfg = _cfg(epochs=3)
        runs = [fine_tune(_fresh(world, cfg), splits["train"][:8], cfg, kg, splits["dev"]) for _ in range(2)]
        assert [h["dev_acc"] for h in runs[0][2]] == [h["dev_acc"] for h in runs[1][2]]
        assert _params_equal(runs[0][0].params, runs[1][0].params)
        assert runs[0][0].stage == "FINETUNE"

    def test_post_to_finetune_allowed_reverse_rejected(self, world):
        kg, splits, _ = world
        cfg = _cfg(epochs=1)
        model = _fresh(world, cfg)
        post_train(model, splits["train"][:2], cfg.replace(stage="POST"))
        fine_tune(model, splits["train"][:2], cfg, kg)
        with pytest.raises(StageError):
            post_train(model, splits["train"][:2], cfg.replace(stage="POST"))


class TestSingleStepDescent:
    @pytest.mark.parametrize("stage", ["POST", "FINETUNE"])
    def test_small_step_does_not_increase(self, world, stage):
        kg, splits, _ = world
        cfg = _cfg(stage=stage, lr=1e-4)
        model = _fresh(world, cfg)
        batch = list(enumerate(splits["train"][:4]))

        def loss():
            g = Graph()
            if stage == "POST":
                out = post_batch_loss(g, model, batch, cfg, 1)
            else:
                out = finetune_batch_loss(g, model, batch, cfg, 1, kg)
            return g, out.total

        g, total = loss()
        before = float(total.value)
        adam_step(model.params, g.backward(total), new_optimizer(cfg))
        assert float(loss()[1].value) <= before


class TestEvaluation:
    def test_untrained_near_chance(self, world):
        kg, splits, _ = world
        cfg = _cfg()
        acc = evaluate_accuracy(_fresh(world, cfg), splits["train"], kg=kg)
        assert 0.0 <= acc <= 0.6

    def test_order_invariant(self, world):
        kg, splits, _ = world
        model = _fresh(world, _cfg())
        data = splits["train"][:9]
        a = predict_logits(model, data)
        b = predict_logits(model, data[::-1])[::-1]
        for x, y in zip(a, b):
            np.testing.assert_allclose(x, y, atol=1e-12)

    def test_empty(self, world):
        with pytest.raises(ValueError):
            evaluate_accuracy(_fresh(world, _cfg()), [])


class TestCheckpoint:
    def _saved(self, world, tmp_path, stage="POST"):
        cfg = _cfg(epochs=1)
        model = _fresh(world, cfg)
        optim = new_optimizer(cfg)
        post_train(model, world[1]["train"][:2], cfg.replace(stage="POST"), optim)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, optim, stage, "abc", path)
        return model, optim, path

    def test_round_trip_bit_exact(self, world, tmp_path):
        model, optim, path = self._saved(world, tmp_path)
        back, optim2, meta = load_checkpoint(path, "abc")
        assert _params_equal(model.params, back.params)
        assert _params_equal(optim.m, optim2.m) and optim.step == optim2.step
        assert back.stage == "POST" and back.vocab == model.vocab and back.config == model.config

    def test_hash_mismatch_warns(self, world, tmp_path):
        _, _, path = self._saved(world, tmp_path)
        with pytest.warns(UserWarning):
            load_checkpoint(path, "other")

    def test_matching_hash_silent(self, world, tmp_path):
        _, _, path = self._saved(world, tmp_path)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            load_checkpoint(path, "abc")

    def test_truncated(self, world, tmp_path):
        _, _, path = self._saved(world, tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, world, tmp_path):
        _, _, path = self._saved(world, tmp_path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_unknown_stage_tag(self, world, tmp_path):
        model = _fresh(world, _cfg())
        with pytest.raises(StageError):
            save_checkpoint(model, None, "DONE", "", tmp_path / "x.ckpt")


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_pairs(["epochs = 3", "learning_rate = 1"])

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_pairs(["epochs 3"])

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            build_config({"loss.ka": "maybe"})

    def test_invariants(self):
        with pytest.raises(ConfigError):
            build_config({"k": "0"})
        with pytest.raises(ConfigError):
            build_config({"epochs": "0"})
        with pytest.raises(ConfigError):
            build_config({"stage": "train"})
        assert build_config({"k": "0", "loss.ka": "off"}).k == 0

    def test_override_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nepochs = 7\nseed = 1\nmodel.d_l = 16\n")
        cfg = load_config(path, ["seed = 9"])
        assert (cfg.epochs, cfg.seed, cfg.model["d_l"]) == (7, 9, 16)

    def test_dump_round_trip(self):
        cfg = build_config({"loss.kbr": "no", "optim.lr": "0.01", "gen.n_examples": "40", "stage": "post"})
        again = build_config(parse_pairs(dump_config(cfg).splitlines()))
        assert again == cfg and again.digest() == cfg.digest()

    def test_model_digest_ignores_training_keys(self):
        a = build_config({"epochs": "3"})
        b = build_config({"epochs": "9"})
        c = build_config({"model.d_l": "16"})
        assert a.model_digest() == b.model_digest() != c.model_digest()
        assert a.digest() != b.digest()


@pytest.mark.parametrize("name", ["post.cfg", "finetune.cfg", "baseline.cfg", "tiny.cfg"])
def test_shipped_configs_parse(name):
    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / name)
    assert cfg.epochs >= 1
