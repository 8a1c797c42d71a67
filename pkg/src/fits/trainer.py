"""Two-stage training: label-free post-training (MLM + KA), then fine-tuning
with QA supervision plus source distinction and backbone regularisation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fits.config import TrainConfig
from fits.corpus import McqaExample, Vocab, mask_tokens, sample_entity_pairs
from fits.encoder import (
    CandidateInput,
    EncoderConfig,
    ModelState,
    Params,
    encode_batch,
    layout_batch,
)
from fits.errors import CheckpointError, ConfigError, NoAlignablePair, StageError
from fits.kg_store import KnowledgeGraph, inject_irrelevant
from fits.numerics.autodiff import Graph, Node
from fits.numerics.optim import OptimState, adam_step
from fits.numerics.tensorio import dump_tensors, load_tensors
from fits import objectives as obj

log = logging.getLogger(__name__)

# stream tags keep the per-purpose random streams independent
_SHUFFLE, _MASK, _PAIRS, _INJECT, _KBR = 11, 12, 13, 14, 15


def _rng_seed(*parts: int) -> list[int]:
    return [int(p) for p in parts]


def make_model(
    cfg: TrainConfig, vocab: Vocab, kg: KnowledgeGraph, seed: int | None = None
) -> ModelState:
    enc = EncoderConfig(
        vocab_size=len(vocab),
        n_entities=len(kg.entities),
        n_relations=len(kg.relations),
        **cfg.model,
    )
    return ModelState.create(enc, cfg.seed if seed is None else seed, vocab.tokens)


def new_optimizer(cfg: TrainConfig) -> OptimState:
    return OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def _candidate_inputs(model: ModelState, ex: McqaExample, subgraphs=None) -> list[CandidateInput]:
    vocab = Vocab(model.vocab)
    sgs = ex.subgraphs if subgraphs is None else subgraphs
    return [
        CandidateInput(vocab.encode(ex.merged[c]), ex.mentions[c], sgs[c])
        for c in range(ex.n_candidates)
    ]


# ---------------------------------------------------------------------------
# post-training
# ---------------------------------------------------------------------------


@dataclass
class PostBatchLoss:
    total: Node
    ka: Node | None
    mlm: Node | None
    skipped_ka: int


def post_batch_loss(
    g: Graph,
    model: ModelState,
    batch: Sequence[tuple[int, McqaExample]],
    cfg: TrainConfig,
    epoch: int,
) -> PostBatchLoss:
    """L_post averaged over every Q-A pair (example x candidate) in ``batch``."""
    P = Params(g, model.params)
    vocab = Vocab(model.vocab)
    items, masked, pair_sets = [], [], []
    skipped = 0
    for idx, ex in batch:
        for c in range(ex.n_candidates):
            ids = vocab.encode(ex.merged[c])
            sg = ex.subgraphs[c]
            if cfg.loss_mlm:
                mb = mask_tokens(ids, _rng_seed(cfg.seed, _MASK, epoch, idx, c))
                ids = list(mb.input_ids)
                masked.append(mb)
            if cfg.loss_ka:
                try:
                    pairs = sample_entity_pairs(
                        ex.mentions[c], sg, cfg.k, _rng_seed(cfg.seed, _PAIRS, epoch, idx, c)
                    )
                except NoAlignablePair:
                    pairs = None
                    skipped += 1
                pair_sets.append(pairs)
            items.append(CandidateInput(ids, ex.mentions[c], sg))
    layout = layout_batch(model.config, items)
    enc = encode_batch(g, P, model.config, layout)
    L = layout.seq_len
    H_flat = g.reshape(enc.H, (layout.n_cand * L, model.config.d_l))

    mlm = None
    if cfg.loss_mlm:
        rows, targets, weights = [], [], []
        for c, mb in enumerate(masked):
            for pos, tgt in zip(mb.positions, mb.targets):
                rows.append(c * L + pos + 1)
                targets.append(tgt)
                weights.append(1.0 / (len(mb.positions) * len(masked)))
        logits = obj.mlm_logits(g, P, g.gather(H_flat, rows))
        mlm = obj.mlm_loss(g, logits, targets, weights)

    ka = None
    if cfg.loss_ka:
        spans, node_rows, labels = [], [], []
        for c, pairs in enumerate(pair_sets):
            if pairs is None:
                continue
            mentions = items[c].mentions
            for (mi, j), y in zip(pairs.pairs, pairs.labels):
                m = mentions[mi]
                spans.append((c * L + m.start + 1, c * L + m.end + 1))
                node_rows.append(layout.local_rows[c][j])
                labels.append(y)
        if spans:
            e_l = g.mean_pool(H_flat, spans)
            e_g = g.gather(enc.E, node_rows)
            ka = obj.ka_loss(g, obj.ka_pair_score(g, P, e_l, e_g), labels)
    if ka is None and mlm is None:
        raise NoAlignablePair("batch has no alignable pair and MLM is disabled")
    return PostBatchLoss(obj.post_loss(g, ka, mlm), ka, mlm, skipped)


def _batches(n: int, size: int, seed: int, epoch: int) -> list[list[int]]:
    order = np.random.default_rng(_rng_seed(seed, _SHUFFLE, epoch)).permutation(n)
    return [list(order[i : i + size]) for i in range(0, n, size)]


def post_train(
    model: ModelState,
    train: Sequence[McqaExample],
    cfg: TrainConfig,
    optim: OptimState | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelState, OptimState, list[dict]]:
    """Stage 1.  Gold answers are never read."""
    if not (cfg.loss_mlm or cfg.loss_ka):
        raise ConfigError("post-training needs loss.mlm or loss.ka enabled")
    if not train:
        raise ValueError("post-training needs a non-empty training split")
    if model.stage == "FINETUNE":
        raise StageError("cannot post-train a fine-tuned model")
    optim = optim or new_optimizer(cfg)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        sums = {"loss": 0.0, "ka": 0.0, "mlm": 0.0}
        skipped = 0
        batches = _batches(len(train), cfg.batch_size, cfg.seed, epoch)
        for batch in batches:
            g = Graph()
            out = post_batch_loss(g, model, [(i, train[i]) for i in batch], cfg, epoch)
            grads = g.backward(out.total)
            adam_step(model.params, grads, optim)
            sums["loss"] += float(out.total.value)
            sums["ka"] += float(out.ka.value) if out.ka is not None else 0.0
            sums["mlm"] += float(out.mlm.value) if out.mlm is not None else 0.0
            skipped += out.skipped_ka
        rec = {"epoch": epoch, "stage": "POST"}
        rec.update({k: v / len(batches) for k, v in sums.items()})
        rec["skipped_ka"] = skipped
        history.append(rec)
        log.info("post epoch %d loss %.4f", epoch, rec["loss"])
        if on_epoch:
            on_epoch(rec)
    model.stage = "POST"
    return model, optim, history


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneBatch:
    total: Node
    sup: Node
    ksd: Node | None
    kbr: Node | None
    logits: np.ndarray  # (examples, n)


def finetune_batch_loss(
    g: Graph,
    model: ModelState,
    batch: Sequence[tuple[int, McqaExample]],
    cfg: TrainConfig,
    epoch: int,
    kg: KnowledgeGraph | None = None,
    inject: bool = True,
) -> FinetuneBatch:
    """Joint candidate softmax per example; KSD/KBR averaged over candidates."""
    P = Params(g, model.params)
    items, correct = [], []
    n = batch[0][1].n_candidates
    for idx, ex in batch:
        if ex.n_candidates != n:
            raise ValueError("examples in one batch must share the candidate count")
        sgs = list(ex.subgraphs)
        if inject and cfg.k_irr > 0:
            if kg is None:
                raise ValueError("injecting irrelevant entities needs the knowledge graph")
            sgs = [
                inject_irrelevant(sg, kg, cfg.k_irr, _rng_seed(cfg.seed, _INJECT, epoch, idx, c))
                for c, sg in enumerate(sgs)
            ]
        items.extend(_candidate_inputs(model, ex, sgs))
        correct.append(ex.correct)
    layout = layout_batch(model.config, items)
    enc = encode_batch(g, P, model.config, layout)
    C = layout.n_cand
    h_int, e_int = enc.h_int(g), enc.e_int(g)
    ent = layout.entity_rows
    pooled = obj.attentive_pool(g, P, enc.E, h_int, ent, layout.node_cand[ent])
    scores = obj.qa_candidate_score(g, P, h_int, e_int, pooled)
    logits = g.reshape(scores, (len(batch), n))
    sup = obj.qa_loss(g, logits, correct)

    ksd = None
    if cfg.loss_ksd and len(ent):
        ksd = obj.ksd_loss(g, P, g.gather(enc.E, ent), layout.node_label[ent], scale=1.0 / C)
    kbr = None
    if cfg.loss_kbr and cfg.k_reg > 0:
        heads, rels, tails = [], [], []
        kg_edges = np.flatnonzero(layout.edge_kg)
        owner = layout.node_cand[layout.edge_src[kg_edges]]
        for c in range(C):
            mine = kg_edges[owner == c]
            if len(mine) > cfg.k_reg:
                ex_idx = batch[c // n][0]
                rng = np.random.default_rng(_rng_seed(cfg.seed, _KBR, epoch, ex_idx, c % n))
                mine = np.sort(rng.choice(mine, size=cfg.k_reg, replace=False))
            heads.extend(layout.edge_src[mine])
            rels.extend(layout.edge_rel[mine])
            tails.extend(layout.edge_dst[mine])
        if heads:
            kbr = obj.kbr_loss(
                g, enc.E, P["rel_emb"], np.array(heads), np.array(rels), np.array(tails),
                scale=1.0 / C,
            )
    total = obj.finetune_loss(g, sup, ksd, kbr, cfg.switches)
    return FinetuneBatch(total, sup, ksd, kbr, logits.value.copy())


def predict_logits(
    model: ModelState,
    examples: Sequence[McqaExample],
    kg: KnowledgeGraph | None = None,
    inject: bool = False,
    k_irr: int = 0,
    seed: int = 0,
    batch_size: int = 16,
) -> list[np.ndarray]:
    """Candidate logits per example (forward pass only, no gradients)."""
    cfg = TrainConfig(loss_ksd=False, loss_kbr=False, k_irr=k_irr, seed=seed)
    out = []
    by_n: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_n.setdefault(ex.n_candidates, []).append(i)
    result: dict[int, np.ndarray] = {}
    for idxs in by_n.values():
        for s in range(0, len(idxs), batch_size):
            chunk = idxs[s : s + batch_size]
            g = Graph()
            fb = finetune_batch_loss(
                g, model, [(i, examples[i]) for i in chunk], cfg, 0, kg, inject=inject
            )
            for row, i in enumerate(chunk):
                result[i] = fb.logits[row]
    for i in range(len(examples)):
        out.append(result[i])
    return out


def evaluate_accuracy(model: ModelState, examples: Sequence[McqaExample], **kw) -> float:
    if not examples:
        raise ValueError("cannot evaluate an empty split")
    logits = predict_logits(model, examples, **kw)
    hits = [obj.predict(obj.softmax_np(lg)) == ex.correct for lg, ex in zip(logits, examples)]
    return float(np.mean(hits))


def fine_tune(
    model: ModelState,
    train: Sequence[McqaExample],
    cfg: TrainConfig,
    kg: KnowledgeGraph | None = None,
    dev: Sequence[McqaExample] | None = None,
    optim: OptimState | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ModelState, OptimState, list[dict]]:
    """Stage 2.  Steps once per batch of examples; tracks dev accuracy."""
    if not train:
        raise ValueError("fine-tuning needs a non-empty training split")
    optim = optim or new_optimizer(cfg)
    history = []
    best = (-1.0, None)
    for epoch in range(1, cfg.epochs + 1):
        sums = {"loss": 0.0, "sup": 0.0, "ksd": 0.0, "kbr": 0.0}
        batches = _batches(len(train), cfg.batch_size, cfg.seed, epoch)
        for batch in batches:
            g = Graph()
            # injected nodes exist only to be told apart by the KSD head
            fb = finetune_batch_loss(
                g, model, [(i, train[i]) for i in batch], cfg, epoch, kg, inject=cfg.loss_ksd
            )
            grads = g.backward(fb.total)
            adam_step(model.params, grads, optim)
            sums["loss"] += float(fb.total.value)
            sums["sup"] += float(fb.sup.value)
            if cfg.loss_ksd and fb.ksd is not None:
                sums["ksd"] += float(fb.ksd.value)
            if cfg.loss_kbr and fb.kbr is not None:
                sums["kbr"] += float(fb.kbr.value)
        rec = {"epoch": epoch, "stage": "FINETUNE"}
        rec.update({k: v / len(batches) for k, v in sums.items()})
        if dev:
            rec["dev_acc"] = evaluate_accuracy(
                model, dev, kg=kg, inject=cfg.inject_at_eval, k_irr=cfg.k_irr, seed=cfg.seed
            )
            if cfg.keep_best_dev and rec["dev_acc"] > best[0]:
                best = (rec["dev_acc"], {k: v.copy() for k, v in model.params.items()})
        history.append(rec)
        log.info("fine-tune epoch %d loss %.4f dev %s", epoch, rec["loss"], rec.get("dev_acc"))
        if on_epoch:
            on_epoch(rec)
    if best[1] is not None:
        for k, v in best[1].items():
            model.params[k][...] = v
    model.stage = "FINETUNE"
    return model, optim, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_STAGE_TAGS = ("INIT", "POST", "FINETUNE")


def save_checkpoint(
    model: ModelState, optim: OptimState | None, stage: str, config_hash: str, path: str | Path
) -> None:
    if stage not in _STAGE_TAGS:
        raise StageError(f"unknown stage tag {stage!r}")
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    meta = {
        "stage": stage,
        "config_hash": config_hash,
        "encoder": asdict(model.config),
        "vocab": model.vocab,
    }
    if optim is not None:
        meta["optim"] = {
            "lr": optim.lr, "beta1": optim.beta1, "beta2": optim.beta2,
            "eps": optim.eps, "step": optim.step,
        }
        tensors.update({f"optim.m/{k}": v for k, v in optim.m.items()})
        tensors.update({f"optim.v/{k}": v for k, v in optim.v.items()})
    Path(path).write_bytes(dump_tensors(tensors, meta))


def load_checkpoint(
    path: str | Path, expected_hash: str | None = None
) -> tuple[ModelState, OptimState | None, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors, meta = load_tensors(data)
    try:
        enc = EncoderConfig(**meta["encoder"])
        stage = meta["stage"]
        vocab = meta["vocab"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint metadata incomplete: {exc}") from exc
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        warnings.warn(
            f"checkpoint config hash {meta.get('config_hash')} != current {expected_hash}",
            stacklevel=2,
        )
    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    model = ModelState(enc, params, vocab, stage)
    optim = None
    if "optim" in meta:
        o = meta["optim"]
        optim = OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        optim.m = {k[len("optim.m/"):]: v for k, v in tensors.items() if k.startswith("optim.m/")}
        optim.v = {k[len("optim.v/"):]: v for k, v in tensors.items() if k.startswith("optim.v/")}
    return model, optim, meta
