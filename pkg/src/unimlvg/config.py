"""Run configuration: a YAML file with [model] [train] [sample] [data]
sections, dotted-key overrides, strict key checking and a content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from .errors import ValidationError
from .model import ModelConfig
from .sampling import SampleConfig
from .training import RATIO_PRESETS, TrainConfig

SECTIONS = ("model", "train", "sample", "data")


@dataclass
class DataConfig:
    seed: int = 0
    scenes: int = 8
    horizon: int = 23
    clip_length: int = 8
    clip_stride: int = 5
    n_actors: int = 4
    # [time, weather] pairs cycled over scenes; every weather appears by day and by night
    attributes: Optional[list] = field(
        default_factory=lambda: [[tm, wx] for wx in ("sunny", "rainy", "snowy") for tm in ("day", "night")]
    )
    views: Optional[list] = None  # camera subset for training; [v] gives single-view clips

    def validate(self) -> None:
        if self.scenes < 0 or self.horizon < 1 or self.clip_length < 1 or self.clip_stride < 1:
            raise ValidationError("data sizes must be positive")
        if self.views is not None and (len(self.views) == 0 or len(set(self.views)) != len(self.views)):
            raise ValidationError("data.views must list distinct camera indices")


@dataclass
class TrainSection:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 1
    image_batch: int = 16
    ratios: Any = "default"  # preset name or four numbers VP, IP, VG, IG
    k_ref: int = 3
    drop_rate: float = 0.2
    timesteps: str = "uniform"
    grad_clip: float = 1.0
    seed: int = 0
    stage_steps: dict = field(default_factory=lambda: {0: 300, 1: 100, 2: 200, 3: 1400})
    checkpoint_every: int = 0

    def ratio_tuple(self) -> tuple[float, ...]:
        if isinstance(self.ratios, str):
            if self.ratios not in RATIO_PRESETS:
                raise ValidationError(f"unknown ratio preset {self.ratios!r}; choose from {sorted(RATIO_PRESETS)}")
            return RATIO_PRESETS[self.ratios]
        return tuple(float(r) for r in self.ratios)

    def stage_config(self, stage: int, steps: Optional[int] = None) -> TrainConfig:
        cfg = TrainConfig(
            stage=stage,
            steps=int(self.stage_steps.get(stage, 0)) if steps is None else steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            ratios=self.ratio_tuple(),
            k_ref=self.k_ref,
            drop_rate=self.drop_rate,
            timesteps=self.timesteps,
            grad_clip=self.grad_clip,
            image_batch=self.image_batch,
            seed=self.seed,
        )
        cfg.validate()
        return cfg


_SECTION_TYPES = {"model": ModelConfig, "train": TrainSection, "sample": SampleConfig, "data": DataConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(hidden=64, prediction="data"))
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleConfig = field(default_factory=SampleConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        out = {"model": self.model.to_dict(), "train": asdict(self.train), "sample": asdict(self.sample), "data": asdict(self.data)}
        out["train"]["stage_steps"] = {str(k): v for k, v in sorted(self.train.stage_steps.items())}
        return out

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> None:
        self.model.validate()
        self.sample.validate()
        self.data.validate()
        for s in self.train.stage_steps:
            self.train.stage_config(int(s))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _coerce(cls, name: str, value):
    if cls is ModelConfig and name in ("injection_sites", "order"):
        return tuple(value)
    if cls is TrainSection and name == "stage_steps":
        if not isinstance(value, Mapping):
            raise ValidationError("train.stage_steps must map stage numbers to step counts")
        return {int(k): int(v) for k, v in value.items()}
    return value


def _build_section(name: str, values: Mapping) -> Any:
    cls = _SECTION_TYPES[name]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    base = RunConfig().__getattribute__(name)
    kw = {f.name: getattr(base, f.name) for f in fields(cls)}
    kw.update({k: _coerce(cls, k, v) for k, v in values.items()})
    return cls(**kw)


def from_mapping(raw: Optional[Mapping]) -> RunConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name in SECTIONS:
        body = raw.get(name) or {}
        if not isinstance(body, Mapping):
            raise ValidationError(f"section [{name}] must be a mapping")
        sections[name] = _build_section(name, body)
    cfg = RunConfig(**sections)
    cfg.validate()
    return cfg


def parse_override(item: str) -> tuple[str, str, Any]:
    """``section.key=value`` with the value parsed as YAML."""
    key, sep, value = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or section not in SECTIONS or not name:
        raise ValidationError(f"override {item!r} must look like section.key=value")
    return section, name, yaml.safe_load(value)


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ValidationError(f"config file {path} not found") from exc
        except yaml.YAMLError as exc:
            raise ValidationError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ValidationError("config file must hold a mapping of sections")
    raw = {k: dict(v or {}) for k, v in raw.items()}
    for item in overrides:
        section, name, value = parse_override(item)
        raw.setdefault(section, {})[name] = value
    return from_mapping(raw)
