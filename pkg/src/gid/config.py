"""Run configuration: dataclasses, file round-trip, and dotted overrides.

Every tunable the trainer, heads, and losses consume lives here so that a
run is fully described by one JSON document whose hash goes into the run
manifest. Override strings use the same ``section.key`` names as the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, UsageError


@dataclass
class EncoderConfig:
    backend: str = "toy"
    dim: int = 16
    vocab_size: int = 1000
    max_len: int = 128
    dropout: float = 0.1
    layers: int = 2
    nheads: int = 2
    seed: int = 0
    freeze: str = "none"  # none | plm_all | plm_all_but_last


@dataclass
class HeadConfig:
    logit_temperature: float = 0.05
    projection_dim: int = 256
    refresh_interval: int = 1


@dataclass
class LossConfig:
    lambda_dc: float = 1.0
    lambda_pc: float = 1.0
    lambda_cp: float = 1.0
    lambda_cl: float = 1.0
    nt_xent_tau: float = 0.07
    nt_xent_reduction: str = "mean"  # mean | sum
    clamp_eps: float = 1e-8


@dataclass
class MetaConfig:
    kind: str = "examples"  # name | paraphrase | keywords | examples
    k: int = 5


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 25
    early_stop_patience: int = 10
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    warmup_steps: int = 500
    seed: int = 0


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


_SECTIONS = ("encoder", "head", "loss", "meta", "train")


def _coerce(value: str, target_type: type) -> object:
    try:
        if target_type is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return target_type(value)
    except ValueError as exc:
        raise UsageError(f"cannot parse {value!r} as {target_type.__name__}") from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    config = RunConfig()
    if path is None:
        return config
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    raw = json.loads(path.read_text(encoding="utf-8"))
    for section, values in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(config, section)
        for key, value in values.items():
            if not hasattr(target, key):
                raise ConfigError(f"unknown config key {section}.{key}")
            setattr(target, key, value)
    return config


def apply_overrides(config: RunConfig, overrides: list[str]) -> dict[str, str]:
    """Apply ``section.key=value`` overrides in place; returns what changed."""
    applied: dict[str, str] = {}
    for override in overrides:
        if "=" not in override:
            raise UsageError(f"override {override!r} is not of the form section.key=value")
        dotted, value = override.split("=", 1)
        if dotted.count(".") != 1:
            raise UsageError(f"override key {dotted!r} is not of the form section.key")
        section, key = dotted.split(".")
        if section not in _SECTIONS:
            raise UsageError(f"unknown config section {section!r} in override {override!r}")
        target = getattr(config, section)
        if not hasattr(target, key):
            raise UsageError(f"unknown config key {dotted!r}")
        current = getattr(target, key)
        setattr(target, key, _coerce(value, type(current)))
        applied[dotted] = value
    return applied
