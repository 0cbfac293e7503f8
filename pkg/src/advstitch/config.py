"""Experiment configuration: one YAML document plus dotted-key overrides.

Every section is a dataclass with working defaults, so an empty document is a
valid configuration. ``ExperimentConfig.hash()`` fingerprints the fully
resolved settings and is stamped into every artifact the CLI writes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .attacks import AttackConfig
from .estimator import EstimatorConfig
from .reconstructor import ReconstructorConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    n_train: int = 2000
    n_test: int = 200
    patch_size: int = 64
    rho: float = 8.0
    n_sources: int = 64
    source_size: int = 128


@dataclass
class TrainSection:
    lr: float = 1e-4
    lr_decay: float = 0.96
    batch_size: int = 16
    epochs: int = 10
    # extra mean corner-distance term in the supervised objective (0 disables)
    corner_weight: float = 0.0
    # write an intermediate checkpoint every this many epochs (0 disables)
    checkpoint_every: int = 0
    reconstructor_epochs: int = 0


@dataclass
class AATSection:
    lam: float = 1.0
    gamma1: float = 3e-4
    gamma2: float = 1e-4
    search_epochs: int = 5
    # edges kept per node when discretizing
    k: int = 2
    supervised_theta: bool = False


@dataclass
class EvalSection:
    attacks: tuple[str, ...] = ("fgsm", "pgd", "soa")
    batch_size: int = 50


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    reconstructor: ReconstructorConfig = field(default_factory=ReconstructorConfig)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackConfig = field(default_factory=AttackConfig)
    aat: AATSection = field(default_factory=AATSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(current, value, key):
    if is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return merge(current, value, key + ".")
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if current is not None and value is not None and not isinstance(value, type(current)):
        raise ConfigError(f"{key}: expected {type(current).__name__}, got {value!r}")
    return value


def merge(obj, data: dict, prefix: str = ""):
    """Return a copy of dataclass ``obj`` with values from the nested mapping ``data``."""
    known = {f.name for f in fields(obj)}
    updates = {}
    for key, value in (data or {}).items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key}")
        updates[key] = _coerce(getattr(obj, key), value, prefix + key)
    try:
        return replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> dict:
    """``a.b.c=value`` to ``{"a": {"b": {"c": value}}}``; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    value = yaml.safe_load(raw) if raw.strip() else None
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, doc)
    for text in overrides:
        cfg = merge(cfg, parse_override(text))
    return cfg
