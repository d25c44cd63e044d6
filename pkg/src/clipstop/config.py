"""Sectioned TOML run configuration with typed defaults and resolved-config snapshots."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import SynthConfig
from .errors import ConfigError
from .evaluation import STD_THRESHOLD
from .ppo import PPOConfig


@dataclass
class RunSection:
    command: str = ""
    seed: int = 0
    run_dir: str = "run"


@dataclass
class DataSection:
    train: str = ""
    test: str = ""


@dataclass
class TrainSection:
    mode: str = "full"


@dataclass
class RewardSection:
    lambda_cost: float = 0.05
    clip_cost: float = 1.0


@dataclass
class EvalSection:
    # empty: every baseline plus each agent policy whose checkpoint is configured
    policies: list = field(default_factory=list)
    n_seeds: int = 10
    quantile: float = 0.25
    std_threshold: float = STD_THRESHOLD
    weight: str = "max"
    greedy: bool = False
    checkpoint: str = ""
    checkpoint_ab1: str = ""
    checkpoint_ab2: str = ""
    export_fig2: bool = False
    figures: bool = True


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(D=None))
    ppo: PPOConfig = field(default_factory=PPOConfig)
    train: TrainSection = field(default_factory=TrainSection)
    reward: RewardSection = field(default_factory=RewardSection)
    eval: EvalSection = field(default_factory=EvalSection)


SECTION_NAMES = tuple(f.name for f in fields(RunConfig))


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int) or (default is None and key == "D"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a table")
        return value
    return value


def update_section(cfg: RunConfig, section: str, values: dict, skip_none: bool = True) -> None:
    """Merge ``values`` into one section, rejecting unknown keys and wrong types."""
    if section not in SECTION_NAMES:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    known = {f.name: f for f in fields(obj)}
    for key, value in values.items():
        if skip_none and value is None:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(obj, key, _coerce(section, key, getattr(obj, key), value))


def from_dict(doc: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in doc.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a [section]")
        update_section(cfg, section, values)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with Path(path).open("rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc)


def to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in SECTION_NAMES:
        sec = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: v for k, v in sec.items() if v is not None}
    return out


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def write_snapshot(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))
