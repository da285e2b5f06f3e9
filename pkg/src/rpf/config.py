"""Run configuration: a flat mapping of dotted keys, stored as YAML."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .policy import KINDS, ConfigError, PolicyConfig

TASKS = ("following", "homing")

# dotted file key -> dataclass attribute
_KEYS = {
    "task": "task",
    "policy.kind": "kind",
    "policy.synthesize": "synthesize",
    "encoder.width": "feature",
    "gru.hidden": "hidden",
    "attention.span": "attention_span",
    "noise": "noise",
    "J": "J",
    "horizon": "horizon",
    "clearance": "clearance",
    "r_demo": "r_demo",
    "r_exec": "r_exec",
    "seed": "seed",
    "seeds.train": "train_seeds",
    "seeds.val": "val_seeds",
    "seeds.test": "test_seeds",
    "train.iterations": "iterations",  # original schedule ran 120k; 20k is the desk-scale budget
    "train.batch": "batch",
    "train.lr": "lr",
    "train.lr_final": "lr_final",
    "train.checkpoint_every": "checkpoint_every",
    "train.val_every": "val_every",
    "train.val_trials": "val_trials",
    "train.pool_size": "pool_size",
    "eval.trials": "trials",
    "workers": "workers",
    "out": "out",
}
_ATTRS = {v: k for k, v in _KEYS.items()}


@dataclass
class RunConfig:
    task: str = "following"
    kind: str = "rpf"
    synthesize: bool = False
    feature: int = 64
    hidden: int = 128
    attention_span: float = 0.0
    noise: float = 0.2
    J: int = 30
    horizon: int = 40
    clearance: float = 0.6
    r_demo: float = 0.0
    r_exec: float = 0.0
    seed: int = 0
    train_seeds: tuple = (0, 10000)
    val_seeds: tuple = (10000, 11000)
    test_seeds: tuple = (20000, 30000)
    iterations: int = 20000
    batch: int = 8
    lr: float = 1e-3
    lr_final: float = 5e-5  # cosine decay from lr down to this
    checkpoint_every: int = 500
    val_every: int = 1000
    val_trials: int = 100
    pool_size: int = 512
    trials: int = 500
    workers: int = 1
    out: str = "runs/default"

    def __post_init__(self):
        for name in ("train_seeds", "val_seeds", "test_seeds"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"policy.kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("train_seeds", "val_seeds", "test_seeds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError(f"{_ATTRS[name]} must be a non-empty [low, high) range")
        ranges = [("seeds.train", self.train_seeds), ("seeds.val", self.val_seeds), ("seeds.test", self.test_seeds)]
        for i in range(3):
            for j in range(i + 1, 3):
                (na, a), (nb, b) = ranges[i], ranges[j]
                if a[0] < b[1] and b[0] < a[1]:
                    raise ConfigError(f"seed ranges {na} {list(a)} and {nb} {list(b)} overlap; make them disjoint")
        if not 0 <= self.noise <= 1:
            raise ConfigError("noise must lie in [0, 1]")
        if not 0 <= self.lr_final <= self.lr:
            raise ConfigError("train.lr_final must lie in [0, train.lr]")
        if self.J < 1 or self.horizon < 1:
            raise ConfigError("J and horizon must be positive")
        for name in ("r_demo", "r_exec"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        PolicyConfig(self.kind, self.feature, self.hidden, self.synthesize, self.attention_span)

    @property
    def policy(self) -> PolicyConfig:
        return PolicyConfig(self.kind, self.feature, self.hidden, self.synthesize, self.attention_span)

    def to_flat(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[_ATTRS[f.name]] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> RunConfig:
        unknown = set(flat) - set(_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{_KEYS[k]: v for k, v in flat.items()})

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_flat(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> RunConfig:
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must be a mapping of dotted keys")
        return cls.from_flat(data)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            return cls.from_yaml(Path(path).read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed config {path}: {e}") from e

    def save(self, path):
        Path(path).write_text(self.to_yaml())

    def with_overrides(self, **kw) -> RunConfig:
        d = asdict(self)
        d.update(kw)
        return RunConfig(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_flat(), sort_keys=True).encode()).hexdigest()[:16]
