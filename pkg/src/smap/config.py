"""Flat JSON run configuration.

Every key is optional; absent keys take the desk defaults. Tokenizer fields use
their plain names (``latent_count``, ``regu``, ...), generator fields carry a
``card_`` prefix (``card_depth``, ``card_cfg_scale``, ...).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .card import CardConfig
from .tokenizer import TokenizerConfig
from .training import DTYPES, TrainConfig, card_config_for

MODES = (
    "train-tokenizer",
    "train-generator",
    "reconstruct",
    "generate",
    "sweep-prefix",
    "cross-swap",
    "gradcheck",
)
CARD_DERIVED = ("token_count", "latent_dim", "cond_dim", "num_classes")
CARD_PREFIX = "card_"
U64_MAX = 2**64 - 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    mode: str = "train-tokenizer"
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    card: CardConfig = field(default_factory=lambda: card_config_for(TokenizerConfig()))
    seed: int = 0
    dataset_seed: int = 0
    n_per_class: int = 500
    batch_size: int = 32
    tokenizer_steps: int = 3000
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 100
    weight_decay: float = 1e-4
    generator_steps: int = 3000
    gen_batch_size: int = 64
    gen_lr: float = 1e-3
    gen_min_lr: float = 1e-5
    gen_weight_decay: float = 1e-5
    dtype: str = "float32"
    tokenizer_checkpoint: str = ""
    generator_checkpoint: str = ""
    out_dir: str = "out"
    samples_per_class: int = 8
    cross_pairs: int = 16
    threads: int = 0

    def tokenizer_train(self) -> TrainConfig:
        return TrainConfig(self.tokenizer_steps, self.batch_size, self.lr, self.min_lr,
                           self.warmup_steps, self.weight_decay, self.seed, self.dtype)

    def generator_train(self) -> TrainConfig:
        return TrainConfig(self.generator_steps, self.gen_batch_size, self.gen_lr, self.gen_min_lr,
                           self.warmup_steps, self.gen_weight_decay, self.seed, self.dtype)


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name not in ("tokenizer", "card")}
_TOK_FIELDS = {f.name: f for f in fields(TokenizerConfig)}
_CARD_FIELDS = {CARD_PREFIX + f.name: f for f in fields(CardConfig) if f.name not in CARD_DERIVED}


def _default(f: dataclasses.Field):
    return f.default if f.default is not dataclasses.MISSING else f.default_factory()


def _check_type(key: str, value, expected):
    kind = {int: "integer", float: "number", str: "string", bool: "boolean"}[expected]
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{key}: expected {kind}, got {json.dumps(value)}")
    return value


def _field_type(f: dataclasses.Field):
    return type(_default(f))


def parse_config(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"syntax error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return from_flat(doc)


def from_flat(doc: dict) -> RunConfig:
    run, tok, card = {}, {}, {}
    for key, value in doc.items():
        if key in _RUN_FIELDS:
            run[key] = _check_type(key, value, _field_type(_RUN_FIELDS[key]))
        elif key in _TOK_FIELDS:
            tok[key] = _check_type(key, value, _field_type(_TOK_FIELDS[key]))
        elif key in _CARD_FIELDS:
            card[key[len(CARD_PREFIX):]] = _check_type(key, value, _field_type(_CARD_FIELDS[key]))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if run.get("mode", "train-tokenizer") not in MODES:
        raise ConfigError(f"mode: expected one of {MODES}, got {run['mode']!r}")
    if run.get("dtype", "float32") not in DTYPES:
        raise ConfigError(f"dtype: expected one of {tuple(DTYPES)}, got {run['dtype']!r}")
    for key in ("seed", "dataset_seed"):
        if not 0 <= run.get(key, 0) <= U64_MAX:
            raise ConfigError(f"{key}: must be an unsigned 64-bit integer")
    for key in ("n_per_class", "batch_size", "gen_batch_size"):
        if run.get(key, 1) < 1:
            raise ConfigError(f"{key}: must be >= 1")
    for key in ("tokenizer_steps", "generator_steps", "warmup_steps", "samples_per_class", "cross_pairs", "threads"):
        if run.get(key, 0) < 0:
            raise ConfigError(f"{key}: must be >= 0")
    try:
        tokenizer = TokenizerConfig(**tok)
        card_cfg = card_config_for(tokenizer, **card)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return RunConfig(tokenizer=tokenizer, card=card_cfg, **run)


def to_flat(cfg: RunConfig) -> dict:
    out = {name: getattr(cfg, name) for name in _RUN_FIELDS}
    out.update({name: getattr(cfg.tokenizer, name) for name in _TOK_FIELDS})
    out.update({key: getattr(cfg.card, key[len(CARD_PREFIX):]) for key in _CARD_FIELDS})
    return out


def serialize(cfg: RunConfig) -> str:
    """Canonical form: every key, sorted, two-space indent, trailing newline."""
    return json.dumps(to_flat(cfg), sort_keys=True, indent=2) + "\n"
