"""Run configuration: one JSON document, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .embeddings import EmbeddingConfig
from .fusion import FusionConfig
from .graph import GNNConfig
from .losses import LossConfig
from .synth import SceneConfig

VARIANTS = ("baseline", "+llm", "+xattn", "+gnn")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    train: str = "train"
    val: str = "val"
    train_count: int = 200
    val_count: int = 50

    def split_dir(self, split: str) -> Path:
        return Path(self.root) / getattr(self, split)


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "real32"
    flip_prob: float = 0.5
    crop: list[int] | None = None
    aux_weight: float = 0.3
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.dtype not in ("real32", "real64"):
            raise ConfigError(f"unknown dtype {self.dtype!r}")


@dataclass
class TrainConfig:
    seed: int = 0
    variant: str = "+gnn"
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    gnn: GNNConfig = field(default_factory=GNNConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    embeddings: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "TrainConfig":
        return from_dict({**self.to_dict(), **changes})


_SECTIONS = {
    "data": DataConfig,
    "scene": SceneConfig,
    "backbone": BackboneConfig,
    "fusion": FusionConfig,
    "gnn": GNNConfig,
    "loss": LossConfig,
    "embeddings": EmbeddingConfig,
    "train": TrainSettings,
}


def _strict(cls, values: Any, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"{where}: {e}") from None


def from_dict(doc: dict) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    kwargs = {}
    for key, val in doc.items():
        if key in _SECTIONS:
            if key == "scene" and isinstance(val, dict):
                val = dict(val)
                for sub, sub_cls in (("classes", "ClassSpec"), ("confusable", "ConfusablePair")):
                    if sub in val:
                        val[sub] = [_scene_item(sub_cls, item, f"scene.{sub}") for item in val[sub]]
            kwargs[key] = _strict(_SECTIONS[key], val, key)
        else:
            kwargs[key] = val
    try:
        return TrainConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _scene_item(kind: str, item, where: str):
    from . import synth

    return _strict(getattr(synth, kind), item, where)


def load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return from_dict(doc)
