"""Experiment configuration: a strict TOML schema over the module dataclasses.

Unknown sections or keys are rejected rather than ignored, and
parse -> serialize -> parse is the identity, so a config file is a complete,
reproducible manifest of a run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import tomli

from .losses import LossWeights
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(Exception):
    """Schema violation in a configuration file."""


@dataclass
class DataConfig:
    min_token_freq: int = 1
    split_ratio: float = 0.8
    toy_images: int = 50
    toy_categories: int = 3


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


_SECTIONS = (
    ("model", ModelConfig),
    ("loss", LossWeights),
    ("train", TrainConfig),
    ("data", DataConfig),
)


def _coerce(section, name, value, target_type):
    if target_type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, bool):
        raise ConfigError(f"[{section}] {name}: expected integer, got boolean")
    if not isinstance(value, target_type):
        raise ConfigError(
            f"[{section}] {name}: expected {target_type.__name__}, "
            f"got {type(value).__name__}"
        )
    return value


def from_toml_text(text):
    """Parse config TOML; every key must belong to the schema."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc

    known = dict(_SECTIONS)
    for section in raw:
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(raw[section], dict):
            raise ConfigError(f"[{section}] must be a table")

    parts = {}
    for section, cls in _SECTIONS:
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        types = {"int": int, "float": float, "str": str, "bool": bool}
        values = {}
        for name, value in raw.get(section, {}).items():
            if name not in fields:
                raise ConfigError(f"unknown key {name!r} in section [{section}]")
            values[name] = _coerce(section, name, value, types[fields[name]])
        try:
            parts[section] = cls(**values)
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    return Config(**parts)


def from_file(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return from_toml_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    raise ConfigError(f"cannot serialize config value {value!r}")


def to_toml(config):
    """Canonical serialization: fixed section and key order."""
    lines = []
    for section, _ in _SECTIONS:
        obj = getattr(config, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
