"""Run configuration: named profiles, YAML files and dotted CLI overrides."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import SynthConfig
from .inference import PipelineConfig
from .models import ConfigError, FprConfig, RpnConfig
from .training import TrainConfig, fpr_train_config, rpn_train_config


@dataclass
class DataConfig:
    dir: str | None = None  # dataset directory; synthetic data is generated when unset
    n_volumes: int = 40
    n_val: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class RunConfig:
    stage: str = "rpn"
    seed: int = 0
    out: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    rpn: RpnConfig = field(default_factory=RpnConfig)
    fpr: FprConfig = field(default_factory=FprConfig)
    rpn_train: TrainConfig = field(default_factory=rpn_train_config)
    fpr_train: TrainConfig = field(default_factory=fpr_train_config)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# Desk profile: reduced widths and patch so the RPN trains on one CPU in about 20 minutes.
DESK = {
    "data": {"n_volumes": 40},
    "rpn": {
        "stem_channels": 4,
        "widths": [16, 32, 32, 32],
        "units": [1, 1, 1, 1],
        "decoder_widths": [32, 32],
        "decoder_units": [1, 1],
        "groups": 4,
        "attention": "proposed_ca",
        "patch": 64,
        "dropout": 0.0,
    },
    "fpr": {
        "stem_channels": [8, 8, 8],
        "widths": [16, 16, 16, 16],
        "units": [1, 1, 1, 1],
        "groups": 4,
        "fc": [64, 32],
    },
    "rpn_train": {
        "epochs": 60,
        "batch_size": 4,
        "steps_per_epoch": 20,
        "lr": 0.01,
        "milestones": [[45, 0.001]],
        "grad_clip": 5.0,
        "p_nodule": 0.9,
        "val_batches": 0,
    },
    "fpr_train": {"epochs": 6, "batch_size": 32, "steps_per_epoch": 20, "lr": 0.01, "grad_clip": 5.0, "val_batches": 0},
    "pipeline": {"patch": 64, "overlap": 16},
}

PROFILES: dict[str, dict] = {"paper": {}, "desk": DESK}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, where: str):
    """Check ``value`` against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected bool, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected list, got {value!r}")
        proto = default[0] if default else None
        if proto is None:
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
        if isinstance(proto, tuple):
            for i, v in enumerate(value):
                if not isinstance(v, (list, tuple)) or len(v) != len(proto):
                    raise ConfigError(f"{where}[{i}]: expected a list of length {len(proto)}, got {v!r}")
            return tuple(
                tuple(_coerce(x, p, f"{where}[{i}]") for x, p in zip(v, proto)) for i, v in enumerate(value)
            )
        return tuple(_coerce(v, proto, f"{where}[{i}]") for i, v in enumerate(value))
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where}: expected string or null, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported value {value!r}")


def _build(cls, base, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {values!r}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for name in known:
        current = getattr(base, name)
        key = f"{where}.{name}" if where else name
        if name not in values:
            kw[name] = current
        elif dataclasses.is_dataclass(current):
            kw[name] = _build(type(current), current, values[name], key)
        else:
            kw[name] = _coerce(values[name], current, key)
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> dict:
    """``a.b=value`` to a nested mapping; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    tree: Any = yaml.safe_load(raw) if raw else None
    for part in reversed(key.strip().split(".")):
        tree = {part: tree}
    return tree


def load_config(path: str | Path | None = None, profile: str = "paper", overrides=()) -> RunConfig:
    """Defaults, then the profile, then the file, then overrides (later wins)."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    values = copy.deepcopy(PROFILES[profile])
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        values = merge(values, loaded)
    for o in overrides:
        values = merge(values, o if isinstance(o, dict) else parse_override(o))
    cfg = _build(RunConfig, RunConfig(), values, "")
    if cfg.stage not in ("rpn", "fpr"):
        raise ConfigError(f"stage must be rpn or fpr, got {cfg.stage!r}")
    return cfg
