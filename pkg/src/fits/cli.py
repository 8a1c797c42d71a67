"""``fits`` command line: data generation, both training stages, evaluation,
dataset transforms, diagnostics, the ablation grid and gradient checks.

Every run writes its fully resolved configuration to ``<out>/config.cfg`` so
it can be replayed with ``--config <out>/config.cfg``.  Exit status is 0 on
success, 1 for usage/config problems and 2 for runtime failures; failures
also print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from fits import __version__
from fits.config import TrainConfig, dump_config, load_config
from fits.corpus import (
    GenConfig,
    apply_operation_a,
    apply_operation_b,
    build_vocab,
    corpus_tokens,
    generate_synthetic_dataset,
    read_jsonl,
    write_jsonl,
)
from fits.errors import ConfigError, FitsError
from fits.kg_store import load_tsv, write_tsv

log = logging.getLogger("fits")

SUBCOMMANDS = ("gen-data", "post-train", "fine-tune", "eval", "transform", "diagnose", "ablate", "grad-check")
SPLITS = ("train", "dev", "test")
LOCK_NAME = ".fits.lock"
ABLATION_ARMS = (
    ("Sup", False, False),
    ("Sup+KSD", True, False),
    ("Sup+KBR", False, True),
    ("Sup+KSD+KBR", True, True),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key (repeatable; wins over the file)",
    )
    common.add_argument("--out", default="fits-out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fits", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fits {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic KG and JSONL splits")
    sub.add_parser("post-train", parents=[common], help="stage 1: MLM + KA")
    sub.add_parser("fine-tune", parents=[common], help="stage 2: QA + KSD + KBR")
    p = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")
    p = sub.add_parser("transform", parents=[common], help="operation A or B over a split")
    p.add_argument("--op", choices=("A", "B"), required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p = sub.add_parser("diagnose", parents=[common], help="alignment, PCA and attention reports")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--attention-examples", type=int, default=5)
    sub.add_parser("ablate", parents=[common], help="post-training x fine-tuning loss grid")
    sub.add_parser("grad-check", parents=[common], help="finite-difference check of both objectives")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def resolve_config(path: str | None, overrides, stage: str | None = None) -> TrainConfig:
    """File, then ``FITS_SEED``, then ``--set`` overrides (highest precedence)."""
    env_seed = os.environ.get("FITS_SEED")
    pairs = [f"seed={env_seed}"] if env_seed not in (None, "") else []
    pairs += list(overrides)
    if stage is not None:
        pairs.insert(0, f"stage={stage}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
    return load_config(path, pairs)


@contextmanager
def locked_dir(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise FitsError(f"output directory {out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _gen_config(cfg: TrainConfig) -> GenConfig:
    return GenConfig(seed=cfg.seed, **cfg.gen)


def _read_lines(path: Path) -> list[str]:
    if not path.exists():
        return []
    return [ln.rstrip("\n") for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]


def load_data(cfg: TrainConfig):
    """The configured KG and splits, or a freshly generated synthetic set.

    With ``data.kg`` set, ``entities.txt``/``relations.txt`` beside it (if
    present) fix the id order.  Unset split paths give empty splits.
    """
    if not cfg.data_kg:
        return generate_synthetic_dataset(_gen_config(cfg))
    kg_path = Path(cfg.data_kg)
    if not kg_path.exists():
        raise FileNotFoundError(f"data.kg not found: {kg_path}")
    kg = load_tsv(
        kg_path,
        _read_lines(kg_path.parent / "entities.txt"),
        _read_lines(kg_path.parent / "relations.txt"),
    )
    splits = {}
    for name in SPLITS:
        path = getattr(cfg, f"data_{name}")
        if path and not Path(path).exists():
            raise FileNotFoundError(f"data.{name} not found: {path}")
        splits[name] = read_jsonl(kg, path) if path else []
    return kg, splits


def load_or_create_model(cfg: TrainConfig, kg, splits):
    from fits.trainer import load_checkpoint, make_model

    if cfg.checkpoint_in:
        if not Path(cfg.checkpoint_in).exists():
            raise FileNotFoundError(f"checkpoint.in not found: {cfg.checkpoint_in}")
        model, _, _ = load_checkpoint(cfg.checkpoint_in, cfg.model_digest())
        return model
    examples = [ex for name in SPLITS for ex in splits[name]]
    return make_model(cfg, build_vocab(corpus_tokens(kg, examples)), kg)


class MetricsWriter:
    """Append-only JSONL, one record per epoch."""

    def __init__(self, path: Path, extra: dict | None = None):
        self.path = path
        self.extra = extra or {}
        path.write_text("", encoding="utf-8")

    def __call__(self, rec: dict) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({**self.extra, **rec}, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _need(split, name):
    if not split:
        raise ConfigError(f"the {name} split is empty; set data.{name}")
    return split


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg: TrainConfig, out: Path) -> dict:
    kg, splits = generate_synthetic_dataset(_gen_config(cfg))
    write_tsv(kg, out / "kg.tsv")
    (out / "entities.txt").write_text("".join(e + "\n" for e in kg.entities), encoding="utf-8")
    (out / "relations.txt").write_text("".join(r + "\n" for r in kg.relations), encoding="utf-8")
    for name, exs in splits.items():
        write_jsonl(exs, out / f"{name}.jsonl")
    return {"entities": len(kg.entities), "triplets": len(kg.triplets),
            **{name: len(v) for name, v in splits.items()}}


def cmd_post_train(args, cfg, out):
    from fits.trainer import post_train, save_checkpoint

    kg, splits = load_data(cfg)
    model = load_or_create_model(cfg, kg, splits)
    metrics = MetricsWriter(out / "metrics.jsonl")
    model, optim, hist = post_train(model, _need(splits["train"], "train"), cfg, on_epoch=metrics)
    ckpt = Path(cfg.checkpoint_out) if cfg.checkpoint_out else out / "post.ckpt"
    save_checkpoint(model, optim, "POST", cfg.model_digest(), ckpt)
    return {"checkpoint": os.path.relpath(ckpt, out), "final": hist[-1]}


def cmd_fine_tune(args, cfg, out):
    from fits.trainer import evaluate_accuracy, fine_tune, save_checkpoint

    kg, splits = load_data(cfg)
    model = load_or_create_model(cfg, kg, splits)
    metrics = MetricsWriter(out / "metrics.jsonl")
    model, optim, hist = fine_tune(
        model, _need(splits["train"], "train"), cfg, kg, splits["dev"] or None, on_epoch=metrics
    )
    ckpt = Path(cfg.checkpoint_out) if cfg.checkpoint_out else out / "finetune.ckpt"
    save_checkpoint(model, optim, "FINETUNE", cfg.model_digest(), ckpt)
    # relative to the output directory, so the report does not depend on where it was run
    result = {"checkpoint": os.path.relpath(ckpt, out), "final": hist[-1]}
    if splits["test"]:
        result["test_acc"] = evaluate_accuracy(model, splits["test"])
    _write_json(out / "result.json", result)
    return result


def cmd_eval(args, cfg, out):
    from fits.diagnostics import probe_accuracies

    kg, splits = load_data(cfg)
    model = load_or_create_model(cfg, kg, splits)
    accs = probe_accuracies(model, _need(splits[args.split], args.split))
    result = {"split": args.split, "accuracy": accs["test"],
              "reason_accuracy": accs["test_reason"], "param_accuracy": accs["test_param"],
              "stage": model.stage, "n": len(splits[args.split])}
    _write_json(out / "accuracy.json", result)
    return result


def cmd_transform(args, cfg, out):
    kg, splits = load_data(cfg)
    data = _need(splits[args.split], args.split)
    op = apply_operation_a if args.op == "A" else apply_operation_b
    tag = "reason" if args.op == "A" else "param"
    path = out / f"{args.split}-{tag}.jsonl"
    write_jsonl(op(data), path)
    return {"op": args.op, "path": str(path), "n": len(data)}


def cmd_diagnose(args, cfg, out):
    from fits import diagnostics as dg

    kg, splits = load_data(cfg)
    model = load_or_create_model(cfg, kg, splits)
    data = _need(splits[args.split], args.split)
    align = dg.entity_alignment_correlation(model, data, cfg.seed)
    _write_json(out / "alignment.json", align.to_dict())
    rows, dist = dg.modality_pca(model, data)
    header = f"width={align.width} centroid_distance={dist!r}"
    (out / "pca.tsv").write_text(dg.pca_tsv(rows, header), encoding="utf-8")
    with open(out / "attention.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for ex in data[: args.attention_examples]:
            rep = dg.attention_report(model, ex, kg)
            fh.write(json.dumps({"id": rep.example_id, "candidates": rep.candidates}) + "\n")
    return {"alignment": align.to_dict(), "centroid_distance": dist}


def cmd_ablate(args, cfg, out):
    from fits.trainer import evaluate_accuracy, fine_tune, make_model, post_train

    kg, splits = load_data(cfg)
    train, dev, test = _need(splits["train"], "train"), splits["dev"] or None, _need(splits["test"], "test")
    vocab = build_vocab(corpus_tokens(kg, [ex for s in SPLITS for ex in splits[s]]))
    base = make_model(cfg, vocab, kg)
    post_cfg = cfg.replace(stage="POST", epochs=cfg.ablate_post_epochs)
    posted, _, _ = post_train(base.copy(), train, post_cfg)
    metrics = MetricsWriter(out / "metrics.jsonl")
    rows = []
    for post_tag, start in (("no-post", base), ("post", posted)):
        for arm, ksd, kbr in ABLATION_ARMS:
            name = f"{arm}/{post_tag}"
            arm_cfg = cfg.replace(
                stage="FINETUNE", epochs=cfg.ablate_finetune_epochs, loss_ksd=ksd, loss_kbr=kbr,
                k_irr=cfg.k_irr if ksd else 0,
            )
            metrics.extra = {"arm": name}
            model, _, _ = fine_tune(start.copy(), train, arm_cfg, kg, dev, on_epoch=metrics)
            rows.append({"arm": name, "objectives": arm, "post": post_tag == "post",
                         "test_acc": evaluate_accuracy(model, test)})
    with open(out / "ablation.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("arm\tpost\ttest_acc\n")
        for r in rows:
            fh.write(f"{r['objectives']}\t{'post' if r['post'] else 'no-post'}\t{r['test_acc']!r}\n")
    _write_json(out / "ablation.json", rows)
    return {"arms": rows}


def cmd_grad_check(args, cfg, out):
    from fits.selfcheck import gradient_suite, max_error

    reports = gradient_suite(cfg.seed, cfg.model)
    result = {"max_rel_error": max_error(reports), "objectives": [r.to_dict() for r in reports]}
    # wall-clock time stays out of the file so repeated runs compare bit-exactly
    stable = {**result, "objectives": [{k: v for k, v in o.items() if k != "seconds"} for o in result["objectives"]]}
    _write_json(out / "gradcheck.json", stable)
    print(f"max relative error: {result['max_rel_error']:.3e}")
    return result


HANDLERS = {
    "gen-data": cmd_gen_data,
    "post-train": cmd_post_train,
    "fine-tune": cmd_fine_tune,
    "eval": cmd_eval,
    "transform": cmd_transform,
    "diagnose": cmd_diagnose,
    "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}
_STAGE_OF = {"post-train": "POST", "fine-tune": "FINETUNE"}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit": code}) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.overrides, _STAGE_OF.get(args.command))
    except UsageError as exc:
        return _fail(1, "UsageError", str(exc))
    except (ConfigError, OSError) as exc:
        return _fail(1, type(exc).__name__, str(exc))
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    out = Path(args.out)
    try:
        with locked_dir(out):
            (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
            result = HANDLERS[args.command](args, cfg, out)
    except (ConfigError, FileNotFoundError) as exc:
        return _fail(1, type(exc).__name__, str(exc))
    except (FitsError, ValueError, OSError) as exc:
        return _fail(2, type(exc).__name__, str(exc))
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
