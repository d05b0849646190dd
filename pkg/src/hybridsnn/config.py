"""Experiment configuration: nested dataclasses, YAML round-trip and a JSON-schema export."""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

from .ann import Stage1Config
from .energy import FLOP_JOULES, SOP_JOULES, EnergyConstants
from .stdp import EXC_RANGE, INH_RANGE, THETA_PLUS_RANGE, Stage2Config


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source: str = "synthetic"        # "synthetic" or "folder"
    path: str | None = None          # image folder when source == "folder"
    image_size: int = 64
    n_classes: int = 4
    n_per_class: int = 100
    seed: int = 0                    # synthetic generation
    split_seed: int = 0
    test_frac: float = 0.2
    val_frac: float = 0.1

    def __post_init__(self):
        if self.source not in ("synthetic", "folder"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'folder', got {self.source!r}")
        if self.source == "folder" and not self.path:
            raise ConfigError("dataset.path is required when dataset.source is 'folder'")
        if self.image_size <= 0 or self.n_classes < 2 or self.n_per_class <= 0:
            raise ConfigError("dataset: image_size > 0, n_classes >= 2 and n_per_class > 0 required")


@dataclass
class BackboneConfig:
    channels: list = field(default_factory=lambda: [8, 16, 32])
    pools: list = field(default_factory=lambda: [2, 2, 4])
    batch_norm: bool = True
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != len(self.pools) or not self.channels:
            raise ConfigError("backbone.channels and backbone.pools must be non-empty and equally long")


@dataclass
class SearchSpace:
    exc: list = field(default_factory=lambda: list(EXC_RANGE))
    inh: list = field(default_factory=lambda: list(INH_RANGE))
    theta_plus: list = field(default_factory=lambda: list(THETA_PLUS_RANGE))
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("search.trials must be >= 1")
        for name in ("exc", "inh", "theta_plus"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"search.{name}: lower bound exceeds upper bound")


@dataclass
class EnergyConfig:
    sop_joules: float = SOP_JOULES
    flop_joules: float = FLOP_JOULES
    include_input_spikes: bool = True

    def constants(self) -> EnergyConstants:
        return EnergyConstants(self.sop_joules, self.flop_joules)


@dataclass
class ExperimentConfig:
    name: str = "toy"
    output_dir: str = "runs/toy"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    t_b_list: list = field(default_factory=lambda: [8, 16, 32, 64, 128, 256])
    t_c_list: list = field(default_factory=lambda: [50, 100, 200, 300])
    feature_t_b: int = 128
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    search: SearchSpace = field(default_factory=SearchSpace)

    def __post_init__(self):
        for name in ("t_b_list", "t_c_list"):
            vals = getattr(self, name)
            if not vals or list(vals) != sorted(vals) or vals[0] < 1:
                raise ConfigError(f"{name} must be a non-empty ascending list of positive integers")
        if self.feature_t_b < 1:
            raise ConfigError("feature_t_b must be >= 1")


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        key = f"{where}.{name}" if where else name
        kwargs[name] = _build(tp, value, key) if is_dataclass(tp) else _coerce(tp, value, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _coerce(tp, value, key):
    args = typing.get_args(tp)
    if value is None:
        if type(None) in args:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    base = next((a for a in args if a is not type(None)), tp) if args else tp
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if base is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if base is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if base is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if base is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


def from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(data)


def to_dict(cfg) -> dict:
    return asdict(cfg)


def dump(cfg) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=False)


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)


_JSON_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string", list: "array"}


def schema(cls=ExperimentConfig) -> dict:
    """JSON Schema (draft 2020-12) for the YAML config file."""
    hints = typing.get_type_hints(cls)
    defaults = asdict(cls())
    props = {}
    for f in fields(cls):
        tp = hints[f.name]
        if is_dataclass(tp):
            props[f.name] = schema(tp)
            continue
        args = typing.get_args(tp)
        base = next((a for a in args if a is not type(None)), tp) if args else tp
        kind = _JSON_TYPES[base]
        entry = {"type": [kind, "null"] if type(None) in args else kind, "default": defaults[f.name]}
        if kind == "array":
            entry["items"] = {"type": "number"}
        props[f.name] = entry
    out = {"type": "object", "additionalProperties": False, "properties": props}
    if cls is ExperimentConfig:
        out = {"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "hybridsnn experiment", **out}
    return out
