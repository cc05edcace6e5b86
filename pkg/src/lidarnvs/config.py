"""Run configuration: a version-stamped JSON file mirroring every module's
config dataclass, with strict unknown-key rejection. CLI flags override
file values."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .field import SceneConfig
from .metrics import EvalConfig
from .training import LossConfig

__all__ = ["RunConfig", "ConfigError", "load_config"]

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration content."""


@dataclass
class ExpansionConfig:
    sigma: float = 0.2            # input perturbation std for training pairs
    tau: float = 0.1              # Gaussian dropout ratio for training pairs
    lateral_offsets: list[float] = field(default_factory=lambda: [-3.5, 3.5])
    spool_timeout: float = 300.0  # seconds per external provider job


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    threads: int = 0  # 0 = leave torch at its default (all cores)
    scene: SceneConfig = field(default_factory=SceneConfig)
    training: LossConfig = field(default_factory=LossConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _fill(cls, payload: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type) or name in ("scene", "training", "evaluation", "expansion"):
            sub = {"scene": SceneConfig, "training": LossConfig,
                   "evaluation": EvalConfig, "expansion": ExpansionConfig}[name]
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{name} must be an object")
            kwargs[name] = _fill(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Load a RunConfig from JSON; missing keys take their defaults, unknown
    keys are rejected."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config root must be an object")
    version = payload.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config version {version}")
    return _fill(RunConfig, payload, "config")
