"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from fits.errors import ConfigError
from fits.objectives import LossSwitches

STAGES = ("POST", "FINETUNE")


@dataclass
class TrainConfig:
    stage: str = "FINETUNE"
    epochs: int = 60
    batch_size: int = 4
    k: int = 4
    k_irr: int = 2
    k_reg: int = 4
    loss_mlm: bool = True
    loss_ka: bool = True
    loss_ksd: bool = True
    loss_kbr: bool = True
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    keep_best_dev: bool = True
    inject_at_eval: bool = False
    data_kg: str = ""
    data_train: str = ""
    data_dev: str = ""
    data_test: str = ""
    checkpoint_in: str = ""
    checkpoint_out: str = ""
    model: dict = field(default_factory=dict)
    gen: dict = field(default_factory=dict)
    ablate_post_epochs: int = 30
    ablate_finetune_epochs: int = 60

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss_ka and self.k < 1:
            raise ConfigError("k must be >= 1 when the KA loss is enabled")
        if self.k_irr < 0 or self.k_reg < 0:
            raise ConfigError("k_irr and k_reg must be >= 0")

    @property
    def switches(self) -> LossSwitches:
        return LossSwitches(self.loss_mlm, self.loss_ka, self.loss_ksd, self.loss_kbr)

    def to_flat(self) -> dict[str, object]:
        out = {}
        for key, (attr, _) in _SCHEMA.items():
            if "." in attr:
                group, sub = attr.split(".", 1)
                value = getattr(self, group).get(sub)
                if value is None:
                    continue
            else:
                value = getattr(self, attr)
            out[key] = value
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def model_digest(self) -> str:
        """Hash of the keys that shape the model and its vocabulary."""
        flat = {k: v for k, v in self.to_flat().items() if k.startswith(("model.", "gen."))}
        return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _stage(text: str) -> str:
    return text.strip().upper()


# config key -> (TrainConfig attribute or "group.sub", parser)
_SCHEMA: dict[str, tuple[str, object]] = {
    "stage": ("stage", _stage),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "k": ("k", int),
    "k_irr": ("k_irr", int),
    "k_reg": ("k_reg", int),
    "loss.mlm": ("loss_mlm", _bool),
    "loss.ka": ("loss_ka", _bool),
    "loss.ksd": ("loss_ksd", _bool),
    "loss.kbr": ("loss_kbr", _bool),
    "optim.lr": ("lr", float),
    "optim.beta1": ("beta1", float),
    "optim.beta2": ("beta2", float),
    "optim.eps": ("eps", float),
    "seed": ("seed", int),
    "keep_best_dev": ("keep_best_dev", _bool),
    "eval.inject_irrelevant": ("inject_at_eval", _bool),
    "data.kg": ("data_kg", str),
    "data.train": ("data_train", str),
    "data.dev": ("data_dev", str),
    "data.test": ("data_test", str),
    "checkpoint.in": ("checkpoint_in", str),
    "checkpoint.out": ("checkpoint_out", str),
    "ablate.post_epochs": ("ablate_post_epochs", int),
    "ablate.finetune_epochs": ("ablate_finetune_epochs", int),
    "model.d_l": ("model.d_l", int),
    "model.d_g": ("model.d_g", int),
    "model.n_unimodal": ("model.n_unimodal", int),
    "model.n_fusion": ("model.n_fusion", int),
    "model.heads": ("model.heads", int),
    "model.gat_heads": ("model.gat_heads", int),
    "model.max_len": ("model.max_len", int),
    "model.ff": ("model.ff", int),
    "model.qa_hidden": ("model.qa_hidden", int),
    "model.fuse_residual": ("model.fuse_residual", _bool),
    "model.ka_distance_init": ("model.ka_distance_init", _bool),
    "gen.n_entities": ("gen.n_entities", int),
    "gen.n_relations": ("gen.n_relations", int),
    "gen.n_examples": ("gen.n_examples", int),
    "gen.n_candidates": ("gen.n_candidates", int),
    "gen.chain_hops": ("gen.chain_hops", int),
    "gen.edge_prob": ("gen.edge_prob", float),
    "gen.hops": ("gen.hops", int),
    "gen.max_nodes": ("gen.max_nodes", int),
}

KNOWN_KEYS = frozenset(_SCHEMA)


def parse_pairs(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_config(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    cfg.model = dict(cfg.model)
    cfg.gen = dict(cfg.gen)
    for key, text in pairs.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        attr, parse = _SCHEMA[key]
        try:
            value = parse(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        if "." in attr:
            group, sub = attr.split(".", 1)
            getattr(cfg, group)[sub] = value
        else:
            setattr(cfg, attr, value)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    pairs = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            pairs.update(parse_pairs(fh, str(path)))
    pairs.update(parse_pairs(overrides, "<override>"))
    return build_config(pairs)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_flat().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
