"""Run configuration: one JSON file drives every pipeline command.

Unknown keys are rejected by name so a typo never silently falls back to a
default. CLI flags override file values after parsing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .merging import MERGE_METHODS
from .model import ACTIVATIONS
from .se_merging import DISTANCE_METRICS


@dataclass(frozen=True)
class SuiteConfig:
    tasks: int = 4
    input_dim: int = 16
    classes: int = 4
    train_per_task: int = 512
    test_per_task: int = 256
    separation_sigmas: float = 6.0


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "relu"


@dataclass(frozen=True)
class FitConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd_momentum"


@dataclass(frozen=True)
class MergeSection:
    method: str = "task_arithmetic"
    scaling: float = 0.3
    ties_density: float = 1.0


@dataclass(frozen=True)
class SESection:
    scaling: float = 0.3
    layer: int | None = None  # None -> penultimate layer L-1 (or L when L == 1)
    metric: str = "l2"
    route_hard: bool = False
    expert_scale: float | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    out_dir: str = "runs"
    run_id: str | None = None
    threads: int | None = None
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: FitConfig = field(default_factory=lambda: FitConfig(epochs=20, learning_rate=0.05))
    finetune: FitConfig = field(default_factory=lambda: FitConfig(epochs=5, learning_rate=0.02))
    merge: MergeSection = field(default_factory=MergeSection)
    se: SESection = field(default_factory=SESection)

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        return "run-" + config_hash(self)[:10]

    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.resolved_run_id()


_SECTION_NAMES = ("suite", "model", "pretrain", "finetune", "merge", "se")
_TOP_LEVEL_KEYS = {"seed", "out_dir", "run_id", "threads", *_SECTION_NAMES}


def _build_section(name: str, default: Any, raw: dict[str, Any]) -> Any:
    """Overlay the given keys onto the stage defaults, rejecting unknown ones."""
    allowed = set(default.__dataclass_fields__)
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {name}.{key}")
    coerced = dict(raw)
    if name == "model" and "hidden" in coerced:
        coerced["hidden"] = tuple(int(w) for w in coerced["hidden"])
    try:
        return dataclasses.replace(default, **coerced)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def parse_config(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in _TOP_LEVEL_KEYS:
            raise ConfigError(f"unknown config key: {key}")
    kwargs: dict[str, Any] = {}
    for name in ("seed", "out_dir", "run_id", "threads"):
        if name in raw:
            kwargs[name] = raw[name]
    defaults = RunConfig()
    for name in _SECTION_NAMES:
        if name in raw:
            section = raw[name]
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            kwargs[name] = _build_section(name, getattr(defaults, name), section)
    cfg = RunConfig(**kwargs)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.seed < 0:
        raise ConfigError("seed must be >= 0")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.model.activation not in ACTIVATIONS:
        raise ConfigError(f"model.activation must be one of {ACTIVATIONS}")
    if cfg.se.metric not in DISTANCE_METRICS:
        raise ConfigError(f"se.metric must be one of {DISTANCE_METRICS}")
    if cfg.merge.method not in MERGE_METHODS:
        raise ConfigError(f"merge.method must be one of {MERGE_METHODS}")
    if not 0.0 < cfg.merge.ties_density <= 1.0:
        raise ConfigError("merge.ties_density must lie in (0, 1]")
    for name, fit in (("pretrain", cfg.pretrain), ("finetune", cfg.finetune)):
        if fit.epochs < 1:
            raise ConfigError(f"{name}.epochs must be >= 1")
        if fit.learning_rate <= 0:
            raise ConfigError(f"{name}.learning_rate must be positive")
        if fit.optimizer not in ("sgd", "sgd_momentum"):
            raise ConfigError(f"{name}.optimizer must be 'sgd' or 'sgd_momentum'")


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return parse_config(raw)


def config_dict(cfg: RunConfig) -> dict[str, Any]:
    d = asdict(cfg)
    d["model"]["hidden"] = list(cfg.model.hidden)
    return d


def config_hash(cfg: RunConfig) -> str:
    d = config_dict(cfg)
    # Where outputs land and how many workers run must not change what a
    # run computes, so they stay out of its identity.
    for key in ("run_id", "out_dir", "threads"):
        d.pop(key, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
