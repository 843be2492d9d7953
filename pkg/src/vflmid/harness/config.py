"""Experiment configuration and its flat ``dotted.key = value`` text format.

Every line is ``key = value`` where ``key`` is a dotted path into the
config tree and ``value`` is JSON (numbers, strings in double quotes,
booleans ``true``/``false``, lists). Blank lines and ``#`` comments are
ignored. Unknown keys and ill-typed values are rejected.

Keys and defaults (see :data:`SCHEMA_DOC` or ``vflmid run --help``)::

    dataset.kind = "synthetic"        # "synthetic" | "images" | "mnist"
    dataset.n = 2000
    dataset.classes = 4
    dataset.dim = 20
    dataset.spread = 0.25
    dataset.side = 8                  # images: each party sees side x side
    dataset.parties = 2
    dataset.images_path = ""          # mnist
    dataset.labels_path = ""
    dataset.subset = []               # mnist class subset, [] = all
    train.* / train.defense.* / train.model.*   -- see TrainConfig
    attack.*                                     -- see AttackConfig
    sweep.param = ""                  # dotted key to vary, "" = none
    sweep.values = []
    seeds = [0]
    out = "out"
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field

from ..attacks import AttackConfig
from ..defenses import DefenseConfig
from ..errors import ConfigError
from ..protocol import ModelConfig, TrainConfig


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    n: int = 2000
    classes: int = 4
    dim: int = 20
    spread: float = 0.25
    side: int = 8
    parties: int = 2
    images_path: str = ""
    labels_path: str = ""
    subset: list[int] = field(default_factory=list)

    def validate(self):
        if self.kind not in ("synthetic", "images", "mnist"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "mnist" and not (self.images_path and self.labels_path):
            raise ConfigError("mnist dataset needs images_path and labels_path")
        if self.parties < 2:
            raise ConfigError(f"need at least 2 parties, got {self.parties}")
        return self


@dataclass
class SweepConfig:
    param: str = ""
    values: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "out"

    def validate(self):
        self.dataset.validate()
        self.train.validate()
        self.attack.validate()
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.sweep.param:
            get_key(self, self.sweep.param)
            if not self.sweep.values:
                raise ConfigError(f"sweep over {self.sweep.param!r} has no values")
        return self


def _leaves(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            yield from _leaves(v, key + ".")
        else:
            yield key, v


def _resolve(cfg, key: str):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(node) or p not in {f.name for f in dataclasses.fields(node)}:
            raise ConfigError(f"unknown config key {key!r}")
        node = getattr(node, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(node) or leaf not in {f.name for f in dataclasses.fields(node)}:
        raise ConfigError(f"unknown config key {key!r}")
    if dataclasses.is_dataclass(getattr(node, leaf)):
        raise ConfigError(f"config key {key!r} names a section, not a value")
    return node, leaf


def get_key(cfg, key: str):
    node, leaf = _resolve(cfg, key)
    return getattr(node, leaf)


def _coerce(key: str, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return value
    return value


def set_key(cfg, key: str, value):
    node, leaf = _resolve(cfg, key)
    setattr(node, leaf, _coerce(key, getattr(node, leaf), value))


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        try:
            value = json.loads(val)
        except json.JSONDecodeError as e:
            raise ConfigError(f"line {lineno}: cannot parse value {val!r} for {key}: {e.msg}") from None
        try:
            set_key(cfg, key, value)
        except ConfigError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in _leaves(cfg))


def with_override(cfg: ExperimentConfig, key: str, value) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    set_key(out, key, value)
    return out


SCHEMA_DOC = serialize_config(ExperimentConfig())

__all__ = ["DatasetConfig", "SweepConfig", "ExperimentConfig", "TrainConfig", "DefenseConfig",
           "ModelConfig", "AttackConfig", "parse_config", "load_config", "serialize_config",
           "get_key", "set_key", "with_override", "SCHEMA_DOC"]
