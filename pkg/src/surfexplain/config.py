"""Run configuration: defaults, JSON round-trip, CLI overrides.

The zero-argument default is the desk preset (642-vertex input,
half-width model) so a minimal config trains in minutes on a CPU.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .losses import LossConfig
from .model import ModelConfig, desk_config


class ConfigError(ValueError):
    pass


@dataclass
class TrainParams:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 20
    multiplicity: int = 1
    balanced: bool = False
    train_fraction: float = 0.75
    seed: int = 7
    precision: str = "f64"
    threads: int = 0             # 0 keeps the ambient thread setting
    save_every: int = 0          # epochs between checkpoints; 0 = final only
    eval_every: int = 0

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.multiplicity < 1:
            raise ConfigError("epochs, batch_size and multiplicity must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must be in (0, 1)")


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=desk_config)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainParams = field(default_factory=TrainParams)

    def __post_init__(self):
        if self.model.input_level != self.synth.input_level:
            raise ConfigError(
                f"model.input_level ({self.model.input_level}) must match "
                f"synth.input_level ({self.synth.input_level})")


_SECTIONS = {"synth": SynthConfig, "model": ModelConfig,
              "loss": LossConfig, "train": TrainParams}


def default_config() -> RunConfig:
    return RunConfig()


def config_from_dict(obj: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) nested dict.

    Unknown sections or keys are rejected rather than ignored.
    """
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, cls in _SECTIONS.items():
        given = obj.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"config section {name!r} must be an object")
        valid = {f.name for f in fields(cls)}
        bad = set(given) - valid
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        base = desk_config() if name == "model" else cls()
        kwargs = {f.name: getattr(base, f.name) for f in fields(cls)}
        kwargs.update(given)
        try:
            sections[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section {name!r}: {exc}") from exc
    try:
        return RunConfig(**sections)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: RunConfig) -> dict:
    def clean(d):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
    return {name: clean(asdict(getattr(cfg, name))) for name in _SECTIONS}


def load_config(path=None) -> RunConfig:
    if path is None:
        return default_config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(obj)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
