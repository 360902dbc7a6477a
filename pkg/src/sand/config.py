"""Model / training configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError

CONFIG_VERSION = 1

HEAD_KINDS = ("binary", "multilabel", "multiclass", "per-step-regression", "per-step-binary")
_HEAD_RE = re.compile(r"^(binary|per-step-regression|per-step-binary|multilabel:\d+|multiclass:\d+)$")


def parse_head_kind(kind: str) -> tuple[str, int]:
    """``"multilabel:25"`` -> ("multilabel", 25); output width for the others."""
    if not _HEAD_RE.match(kind):
        raise ConfigError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS} (K/C as 'multilabel:K')")
    if ":" in kind:
        name, n = kind.split(":")
        if int(n) < 1 or (name == "multiclass" and int(n) < 2):
            raise ConfigError(f"head kind {kind!r} needs a positive label count")
        return name, int(n)
    return kind, {"binary": 2, "per-step-binary": 2, "per-step-regression": 1}[kind]


@dataclass
class ModelConfig:
    R: int = 8
    d: int = 64
    h: int = 1
    N: int = 2
    heads: int = 8
    r: int = 16
    M: int = 12
    dropout_residue: float = 0.1
    dropout_attention: float = 0.1
    dropout_input: float = 0.1
    include_self: bool = True
    head_kind: str = "binary"
    T_max: int = 512
    seed: int = 0
    learn_positional: bool = False
    # "auto" picks the banded O(T*r*d) kernel whenever the window is shorter than T
    attention: str = "auto"

    def __post_init__(self):
        _normalize_types(self)

    @property
    def d_ff(self) -> int:
        return 4 * self.d

    def validate(self) -> "ModelConfig":
        _normalize_types(self)
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.d <= self.R:
            raise ConfigError(f"embedding size d={self.d} must exceed input variables R={self.R}")
        if not 1 <= self.r <= self.T_max:
            raise ConfigError(f"mask size r={self.r} must lie in [1, T_max={self.T_max}]")
        if not 1 <= self.M <= self.T_max:
            raise ConfigError(f"interpolation factor M={self.M} must lie in [1, T_max={self.T_max}]")
        if self.h < 1 or self.h % 2 == 0:
            raise ConfigError(f"embedding kernel h={self.h} must be odd")
        for name in ("dropout_residue", "dropout_attention", "dropout_input"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name}={p} must lie in [0, 1)")
        if self.attention not in ("auto", "banded", "dense"):
            raise ConfigError(f"attention must be auto|banded|dense, got {self.attention!r}")
        if not self.include_self and self.T_max >= 1:
            # the first position has no strict-past keys
            raise ConfigError("include_self=false leaves position 1 with an empty attention window")
        parse_head_kind(self.head_kind)
        return self


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    chunk_size: int = 20000
    chunks_per_epoch: int = 0  # 0 = every chunk each epoch
    patience: int = 5
    metric: str = ""  # empty = the head's headline metric
    seed: int = 0
    clip_norm: float = 5.0  # 0 disables
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8

    def __post_init__(self):
        _normalize_types(self)

    def validate(self) -> "TrainConfig":
        _normalize_types(self)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.chunk_size < self.batch_size:
            raise ConfigError(f"chunk_size={self.chunk_size} must be >= batch_size={self.batch_size}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lambdas: dict[str, float] = field(default_factory=dict)


def _coerce(value: str, typ: Any, key: str):
    try:
        if typ in (bool, "bool"):
            low = value.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def _normalize_types(obj) -> None:
    """Make numeric fields carry their declared type (0 -> 0.0 for floats)."""
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if f.type in ("float", float) and isinstance(v, (int, np.integer)) and not isinstance(v, bool):
            setattr(obj, f.name, float(v))
        elif f.type in ("int", int) and isinstance(v, np.integer):
            setattr(obj, f.name, int(v))


def _field_types(cls) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def parse_kv_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def update_dataclass(obj, values: dict[str, str], strict: bool = True):
    types = _field_types(type(obj))
    for key, value in values.items():
        if key not in types:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        setattr(obj, key, _coerce(value, types[key], key))
    return obj


def load_run_config(text: str) -> RunConfig:
    """Parse a run config.  ``seed`` feeds both model init and training."""
    values = parse_kv_text(text)
    version = values.pop("version", str(CONFIG_VERSION))
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"unsupported config version {version}")
    cfg = RunConfig()
    model_keys = set(_field_types(ModelConfig))
    train_keys = set(_field_types(TrainConfig))
    for key, value in values.items():
        if key.startswith("lambda_"):
            cfg.lambdas[key[len("lambda_"):]] = _coerce(value, float, key)
            continue
        if key not in model_keys and key not in train_keys:
            raise ConfigError(f"unknown config key {key!r}")
        if key in model_keys:
            update_dataclass(cfg.model, {key: value})
        if key in train_keys:
            update_dataclass(cfg.train, {key: value})
    return cfg


def read_run_config(path: str | Path) -> RunConfig:
    return load_run_config(Path(path).read_text())


def to_kv_text(*objs, prefix: str = "") -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{prefix}{f.name} = {v}")
    return "\n".join(lines) + "\n"


def sub_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named consumer (``data``, ``init``, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
