"""JSON run configuration with strict keys and dotted overrides."""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .stylecal import AafConfig, CalibrationConfig

CONFIG_VERSION = 1
PRECISION_ENV = "TFCAL_PRECISION"


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr_extractor: float = 0.01
    lr_head: float = 0.01
    weight_decay: float = 5e-4
    decay_factor: float = 0.1
    decay_epoch_fraction: float = 0.8


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 32, 64)
    insertion_block: int = 2


@dataclass
class TrainConfig:
    version: int = CONFIG_VERSION
    dataset: str = "data"
    target_domain: int = 3
    val_fraction: float = 0.1
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    precision: str = "single"
    optim: OptimConfig = field(default_factory=OptimConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    aaf: AafConfig = field(default_factory=AafConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        self.model.channels = tuple(self.model.channels)

    @property
    def uses_style_layer(self) -> bool:
        return self.aaf.enabled or self.calibration.train or self.calibration.test

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"]["channels"] = list(d["model"]["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "")

    def replace(self, **changes) -> "TrainConfig":
        """Copy with dotted-key changes, e.g. ``replace(**{"aaf.enabled": False})``."""
        d = self.to_dict()
        for key, value in changes.items():
            _set_dotted(d, key, value)
        return TrainConfig.from_dict(d)


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a config section")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"override {key!r}: unknown key")
    node[parts[-1]] = value


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b=value`` strings; values are parsed as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        _set_dotted(d, key.strip(), _parse_value(text))
    return d


def read_json(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON: {exc}") from exc


def load_train_config(path=None, overrides=()) -> TrainConfig:
    base = TrainConfig().to_dict() if path is None else {**TrainConfig().to_dict(), **read_json(path)}
    cfg = TrainConfig.from_dict(apply_overrides(base, overrides))
    env = os.environ.get(PRECISION_ENV)
    if env:
        if env not in ("single", "double"):
            raise ConfigError(f"{PRECISION_ENV} must be 'single' or 'double', got {env!r}")
        cfg.precision = env
    return cfg


def load_data_config(path=None, overrides=()) -> SyntheticSpec:
    d = {"version": CONFIG_VERSION, **SyntheticSpec().to_dict()}
    if path is not None:
        d.update(read_json(path))
    d = apply_overrides(d, overrides)
    if d.pop("version", None) != CONFIG_VERSION:
        raise ConfigError("unsupported data config version")
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return SyntheticSpec.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data config: {exc}") from exc
