"""Experiment configuration: one JSON document that drives every CLI command."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .explorer import CostWeights, FusionConfig
from .gridmap import ConfigError
from .nnet import NetConfig, ShapeError
from .simworld import FloorplanConfig, SensorSpec
from .training import LossWeights, TrainConfig

SCHEMA = "sensemap-config/1"
OUT_ENV = "SENSEMAP_OUT"

_SECTIONS = {
    "world": FloorplanConfig,
    "sensor": SensorSpec,
    "net": NetConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "fusion": FusionConfig,
    "weights": CostWeights,
}
# Fields that say where or how fast to run, not what to compute.
_NOT_HASHED = ("out", "workers")


@dataclass
class ExperimentConfig:
    world: FloorplanConfig = field(default_factory=FloorplanConfig)
    sensor: SensorSpec = field(default_factory=SensorSpec)
    net: NetConfig = field(default_factory=lambda: NetConfig(side=32, base=8, patch=4, depth=2, heads=4))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    loss: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    budget: Optional[int] = None
    map_count: int = 10
    repeats: int = 5
    episodes: int = 2
    stride: int = 5
    train_fraction: float = 0.75
    phi_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.map_count < 1 or self.repeats < 1:
            raise ConfigError("map_count and repeats must be >= 1")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.budget is not None and self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.net.side != 2 * self.sensor.range_L:
            raise ConfigError(f"net.side {self.net.side} must equal 2 * sensor.range_L ({2 * self.sensor.range_L})")

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def world_seeds(self) -> list[int]:
        return [self.world.seed + i for i in range(self.map_count)]

    def world_config(self, seed: int) -> FloorplanConfig:
        return dataclasses.replace(self.world, seed=seed)

    def large_net(self) -> NetConfig:
        return dataclasses.replace(self.net, base=2 * self.net.base)

    def to_json(self) -> dict:
        d: dict[str, Any] = {"schema": SCHEMA}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return json.loads(json.dumps(d))  # tuples -> lists

    def hash(self) -> str:
        d = self.to_json()
        for k in _NOT_HASHED:
            d.pop(k, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def out_dir(self) -> Path:
        return Path(self.out)


def _coerce(cls, name: str, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k) if k in known else None
        kwargs[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ShapeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    schema = d.pop("schema", SCHEMA)
    if schema != SCHEMA:
        raise ConfigError(f"unsupported config schema {schema!r} (expected {SCHEMA!r})")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = _coerce(_SECTIONS[k], k, v) if k in _SECTIONS else v
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        return from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, assignments: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` or ``section.key=value`` strings; values parse as JSON when possible."""
    d = cfg.to_json()
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return from_dict(d)


def resolve(path: Optional[str], overrides: list[str], out_flag: Optional[str]) -> ExperimentConfig:
    """File values, then ``--set`` overrides; output root from flag, else env, else file."""
    cfg = load_config(path) if path else ExperimentConfig()
    cfg = apply_overrides(cfg, overrides)
    out = out_flag or os.environ.get(OUT_ENV)
    if out:
        cfg = dataclasses.replace(cfg, out=out)
    return cfg
