"""Model/training configuration, plain key=value config files, and digests.

Config files are flat `key = value` lines (# comments allowed). Unknown keys
are rejected so typos cannot silently fall back to defaults. The hidden size
key is `d`; remaining keys match the dataclass field names below.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

VALID_LOSSES = ("ntp", "ncp", "vq", "mtp")
VALID_MODES = ("conceptlm", "pm", "ntp", "mtp")


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration key."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale preset."""

    n_embd: int = 64
    n_heads: int = 4
    encoder_layers: int = 1
    decoder_layers: int = 5
    concept_layers: int = 2
    chunk_size: int = 4
    segments: int = -1  # -1: follow n_heads
    codebook_entries: int = 64
    vocab_size: int = 256
    block_size: int = 256
    losses: tuple = ("ntp", "ncp", "vq")
    commit_beta: float = 0.25
    ncp_target_stop_grad: bool = False
    vq_commit_to_encoder: bool = False
    mtp_heads: int = 4
    mode: str = "conceptlm"
    dtype: str = "float64"

    def __post_init__(self):
        if self.segments == -1:
            self.segments = self.n_heads
        if isinstance(self.losses, str):
            self.losses = tuple(p for p in self.losses.split(",") if p)
        self.losses = tuple(sorted(set(self.losses), key=VALID_LOSSES.index))
        self.validate()

    def validate(self) -> None:
        if self.n_embd <= 0 or self.n_embd % self.n_heads != 0:
            raise ConfigError("d must be positive and divisible by n_heads")
        if self.n_embd % self.segments != 0:
            raise ConfigError("d must be divisible by segments")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.codebook_entries < 2:
            raise ConfigError("codebook_entries must be >= 2")
        if self.segments < 1:
            raise ConfigError("segments must be >= 1")
        if self.encoder_layers < 0:
            raise ConfigError("encoder_layers must be >= 0")
        if self.decoder_layers < 1:
            raise ConfigError("decoder_layers must be >= 1")
        if self.block_size % self.chunk_size != 0:
            raise ConfigError("block_size must be a multiple of chunk_size")
        if self.mode not in VALID_MODES:
            raise ConfigError(f"unknown mode '{self.mode}'")
        for name in self.losses:
            if name not in VALID_LOSSES:
                raise ConfigError(f"unknown loss '{name}'")
        if not self.losses:
            raise ConfigError("at least one loss must be enabled")
        if self.mode != "conceptlm" and ("ncp" in self.losses or "vq" in self.losses):
            raise ConfigError("ncp/vq losses require the concept module (mode=conceptlm)")
        if ("ncp" in self.losses or "vq" in self.losses) and self.concept_layers < 1:
            raise ConfigError("concept_layers must be >= 1 when ncp is enabled")
        if "mtp" in self.losses and self.mode != "mtp":
            raise ConfigError("mtp loss requires mode=mtp")
        if self.mode == "mtp" and self.losses != ("mtp",):
            raise ConfigError("mode=mtp trains with the mtp loss alone")
        if self.mtp_heads < 1:
            raise ConfigError("mtp_heads must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def segment_width(self) -> int:
        return self.n_embd // self.segments

    @property
    def max_concepts(self) -> int:
        return self.block_size // self.chunk_size

    def digest(self) -> str:
        return _digest_pairs(to_pairs(self))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 16
    seq_len: int = 256
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    min_lr_ratio: float = 0.1
    log_every: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must be <= total_steps")
        if self.total_steps < 1 or self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("total_steps, batch_size and seq_len must be positive")
        if self.learning_rate < 0 or self.min_lr_ratio < 0:
            raise ConfigError("learning_rate and min_lr_ratio must be >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")

    def digest(self) -> str:
        return _digest_pairs(to_pairs(self))


# file key <-> dataclass field; `d` is the one non-identity mapping
_KEY_TO_FIELD = {"d": "n_embd"}
_FIELD_TO_KEY = {v: k for k, v in _KEY_TO_FIELD.items()}
_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_REQUIRED_KEYS = ("d",)


def _coerce(raw: str, kind, key: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key '{key}': expected a boolean, got '{raw}'")
    if kind is int or kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key '{key}': expected an integer, got '{raw}'") from None
    if kind is float or kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key '{key}': expected a number, got '{raw}'") from None
    if kind is tuple or kind == "tuple":
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    return raw


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse a flat key=value config into (ModelConfig, TrainConfig)."""
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    seen_keys = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in seen_keys:
            raise ConfigError(f"duplicate key '{key}'")
        seen_keys.add(key)
        name = _KEY_TO_FIELD.get(key, key)
        if name in _MODEL_FIELDS:
            f = _MODEL_FIELDS[name]
            kind = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}[
                f.type if isinstance(f.type, str) else f.type.__name__
            ]
            model_kwargs[name] = _coerce(raw, kind, key)
        elif name in _TRAIN_FIELDS:
            f = _TRAIN_FIELDS[name]
            kind = {"int": int, "float": float, "str": str}[
                f.type if isinstance(f.type, str) else f.type.__name__
            ]
            train_kwargs[name] = _coerce(raw, kind, key)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    for req in _REQUIRED_KEYS:
        name = _KEY_TO_FIELD.get(req, req)
        if name not in model_kwargs:
            raise ConfigError(f"missing required key '{req}'")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_pairs(cfg) -> list[tuple[str, str]]:
    """Canonical (key, value) pairs in field order, with file-key names."""
    pairs = []
    for f in fields(cfg):
        key = _FIELD_TO_KEY.get(f.name, f.name)
        pairs.append((key, _format_value(getattr(cfg, f.name))))
    return pairs


def format_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = [f"{k} = {v}" for k, v in to_pairs(model)]
    if train is not None:
        lines += [f"{k} = {v}" for k, v in to_pairs(train)]
    return "\n".join(lines) + "\n"


def _digest_pairs(pairs: list[tuple[str, str]]) -> str:
    blob = "\n".join(f"{k}={v}" for k, v in pairs).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
