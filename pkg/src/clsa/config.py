"""Run configuration: one nested dataclass, loadable from YAML or JSON."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import StrongAugConfig, WeakAugConfig
from .encoder import ArchConfig
from .losses import LossConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 20
    batch_size: int = 128
    base_lr: float = 0.03
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    exempt_norm_bias: bool = False
    bank_size: int = 4096
    key_momentum: float = 0.99
    checkpoint_every: int = 0  # epochs between checkpoints; 0 keeps only the final one
    num_workers: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    weak: WeakAugConfig = field(default_factory=WeakAugConfig)
    strong: StrongAugConfig = field(default_factory=StrongAugConfig)

    def __post_init__(self):
        for name in ("batch_size", "bank_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("epochs", "checkpoint_every", "num_workers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.weight_decay < 0 or not 0 <= self.sgd_momentum < 1:
            raise ConfigError("weight_decay must be >= 0 and sgd_momentum in [0, 1)")
        if not 0 <= self.key_momentum <= 1:
            raise ConfigError("key_momentum must lie in [0, 1]")
        if self.batch_size > self.bank_size:
            raise ConfigError("batch_size must not exceed bank_size")

    @property
    def lr(self) -> float:
        """Initial learning rate after linear batch-size scaling."""
        return self.base_lr * self.batch_size / 256

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict | None) -> "TrainConfig":
        return _build(cls, data or {}, prefix="")

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        """Apply ``{"loss.beta": 0.5, "epochs": 3}`` style dotted overrides."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for part in parents:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section '{dotted}'")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config field '{dotted}'")
            node[leaf] = value
        return TrainConfig.from_dict(data)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{prefix.rstrip('.') or '<root>'}' must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config field '{prefix}{sorted(unknown)[0]}'")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(hint, value, f"{prefix}{name}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from exc


def _coerce(hint, value, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    try:
        if origin is tuple:
            if not isinstance(value, (list, tuple)):
                raise TypeError("expected a list")
            elem = args[0] if args else float
            return tuple(_coerce(elem, v, where) for v in value)
        if hint is bool:
            if not isinstance(value, bool):
                raise TypeError("expected true/false")
            return value
        if hint is int:
            if isinstance(value, bool) or float(value) != int(value):
                raise TypeError("expected an integer")
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            if not isinstance(value, str):
                raise TypeError("expected a string")
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for '{where}': {value!r} ({exc})") from exc
    return value


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return TrainConfig.from_dict(data or {})


def save_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
