"""Run configuration: one flat JSON document, snake_case keys.

The document mixes training, architecture and routing fields; the loader
splits them by known key, rejects anything unknown, and materializes the
dataclasses. ``dtype`` is the per-run precision switch.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .model import ModelConfig
from .routing import RoutingPolicy

__all__ = ["ConfigError", "TrainConfig", "load_config", "config_from_dict", "config_to_dict"]


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass
class TrainConfig:
    """Training hyperparameters plus the model description."""

    seq_len: int = 128
    batch_size: int = 16
    steps: int = 1000
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    warmup_steps: int = 100
    min_lr: float = 0.0
    seed: int = 0
    eval_every: int = 100
    eval_batches: int = 16
    train_data: str | None = None
    eval_data: str | None = None
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("seq_len", "batch_size", "steps", "eval_every", "eval_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")
        if self.warmup_steps < 0 or self.min_lr < 0:
            raise ConfigError("warmup_steps and min_lr must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


_TRAIN_KEYS = {
    f.name for f in dataclasses.fields(TrainConfig) if f.name != "model"
}
_MODEL_KEYS = {
    f.name for f in dataclasses.fields(ModelConfig) if f.name != "routing"
}
_ROUTING_KEYS = {f.name for f in dataclasses.fields(RoutingPolicy)}


def config_from_dict(doc: dict) -> TrainConfig:
    """Build a TrainConfig from one flat dict; unknown keys are an error."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    train_kw, model_kw, routing_kw = {}, {}, {}
    for key, value in doc.items():
        if key in _TRAIN_KEYS:
            train_kw[key] = value
        elif key in _MODEL_KEYS:
            model_kw[key] = value
        elif key in _ROUTING_KEYS:
            routing_kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        routing = RoutingPolicy(**routing_kw)
        model = ModelConfig(routing=routing, **model_kw)
        return TrainConfig(model=model, **train_kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(cfg: TrainConfig) -> dict:
    """Flatten back to the on-disk schema (inverse of config_from_dict)."""
    doc = {}
    for name in sorted(_TRAIN_KEYS):
        doc[name] = getattr(cfg, name)
    for name in sorted(_MODEL_KEYS):
        doc[name] = getattr(cfg.model, name)
    for name in sorted(_ROUTING_KEYS):
        doc[name] = getattr(cfg.model.routing, name)
    return doc


def load_config(path: str) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(doc)
