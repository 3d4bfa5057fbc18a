"""YAML run configuration: sections map onto the typed config dataclasses.

Unknown sections or keys are rejected.  Precedence is
command-line flags > config file > defaults, and the defaults reproduce the
published training recipe wherever one is stated.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .model import ModelConfig
from .objectives import LossWeights
from .training import StageConfig


@dataclass
class EvalConfig:
    direction: str = "a2g"
    altitude: str = "all"
    rerank: bool = True
    k1: int = 20
    k2: int = 6
    lam: float = 0.3
    memory: str = "topk"   # "topk" | "off"
    export: Optional[str] = None

    def __post_init__(self) -> None:
        if self.direction.lower() not in ("a2g", "g2a"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if str(self.altitude) not in ("all", "15", "30", "80", "120"):
            raise ConfigError(f"unknown altitude {self.altitude!r}")
        if self.memory not in ("topk", "off"):
            raise ConfigError(f"eval memory mode must be 'topk' or 'off'")


@dataclass
class DataConfig:
    manifest: Optional[str] = None
    frames_dir: Optional[str] = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: StageConfig = field(default_factory=StageConfig.stage1)
    stage2: StageConfig = field(default_factory=StageConfig.stage2)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {
    "model": (ModelConfig, lambda kw: ModelConfig(**kw)),
    "stage1": (StageConfig, lambda kw: StageConfig.stage1(**kw)),
    "stage2": (StageConfig, lambda kw: StageConfig.stage2(**kw)),
    "loss": (LossWeights, lambda kw: LossWeights(**kw)),
    "data": (DataConfig, lambda kw: DataConfig(**kw)),
    "eval": (EvalConfig, lambda kw: EvalConfig(**kw)),
}


def _check_keys(section: str, cls, values: dict) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {sorted(unknown)}; "
            f"valid keys: {sorted(known)}"
        )


def load_config(path: Optional[Path | str] = None,
                overrides: Optional[dict[str, dict[str, Any]]] = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus per-section overrides."""
    raw: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        raw = loaded
    unknown_sections = set(raw) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(
            f"unknown config section(s): {sorted(unknown_sections)}; "
            f"valid sections: {sorted(_SECTIONS)}"
        )
    merged: dict[str, dict[str, Any]] = {}
    for section in _SECTIONS:
        values = dict(raw.get(section) or {})
        for key, value in (overrides or {}).get(section, {}).items():
            if value is not None:
                values[key] = value
        merged[section] = values
    kwargs = {}
    for section, (cls, build) in _SECTIONS.items():
        _check_keys(section, cls, merged[section])
        try:
            kwargs[section] = build(merged[section])
        except TypeError as exc:
            raise ConfigError(f"invalid [{section}] config: {exc}") from None
    return RunConfig(**kwargs)


def config_reference() -> str:
    """All config keys with their defaults, for ``--help`` output."""
    lines = []
    defaults = RunConfig()
    for section, (cls, _) in _SECTIONS.items():
        lines.append(f"[{section}]")
        instance = getattr(defaults, section)
        for f in dataclasses.fields(cls):
            lines.append(f"  {f.name} = {getattr(instance, f.name)!r}")
    return "\n".join(lines)
