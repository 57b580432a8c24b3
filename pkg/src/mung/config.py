"""Run configuration: one JSON document, defaults for every field, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .generator import GeneratorConfig
from .synth import SceneConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PretrainConfig:
    n: int = 4000
    steps: int = 400
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.01


@dataclass
class EvalConfig:
    n_test: int = 1000
    n_val: int = 256
    m: int = 4


def _clean_scene() -> SceneConfig:
    return SceneConfig(distractors_min=0, distractors_max=0, jitter=0.1)


def _task_scene() -> SceneConfig:
    return SceneConfig(distractors_min=1, distractors_max=3, jitter=0.1)


@dataclass
class RunConfig:
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain_scene: SceneConfig = field(default_factory=_clean_scene)
    task_scene: SceneConfig = field(default_factory=_task_scene)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.backbone.d_raw != self.task_scene.d_raw or self.backbone.d_raw != self.pretrain_scene.d_raw:
            raise ConfigError(f"backbone.d_raw={self.backbone.d_raw} but scenes emit {self.task_scene.d_raw}")
        if self.backbone.n_vis_tokens != self.task_scene.n_slots:
            raise ConfigError(
                f"backbone.n_vis_tokens={self.backbone.n_vis_tokens} but task_scene.n_slots={self.task_scene.n_slots}"
            )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "backbone": BackboneConfig,
    "pretrain_scene": SceneConfig,
    "task_scene": SceneConfig,
    "pretrain": PretrainConfig,
    "generator": GeneratorConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    defaults = RunConfig() if cls is RunConfig else None
    kwargs = {}
    for k, v in data.items():
        if cls is RunConfig and k in _SECTIONS:
            base = asdict(getattr(defaults, k))
            base.update(_checked_section(_SECTIONS[k], v, f"{path}.{k}"))
            try:
                kwargs[k] = _SECTIONS[k](**base)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}.{k}: {exc}") from exc
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _checked_section(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")
    return data


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(data)


def minimal_gradcheck(cfg: RunConfig) -> tuple[BackboneConfig, GeneratorConfig]:
    """Tiny model for the full-pipeline finite-difference check (d_model=8, 2 visual tokens, 1 layer)."""
    bb = dataclasses.replace(cfg.backbone, d_model=8, n_vis_tokens=2, n_decoder_layers=1, n_heads=2, d_ff=16)
    gen = dataclasses.replace(cfg.generator, width=4, n_heads=2)
    return bb, gen
