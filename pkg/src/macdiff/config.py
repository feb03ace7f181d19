"""Run configuration: dataclasses, file loading with dotted overrides, fingerprints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .masking import MaskSpec
from .model import ModelConfig


class ConfigError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "config error"


@dataclass
class DiffusionConfig:
    T: int = 1000
    kind: str = "inverse_cosine"
    tau: Optional[float] = None


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 128
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: Optional[int] = None
    checkpoint_every: int = 50
    crop_ratio: tuple = (0.5, 1.0)
    rotation_max: float = math.pi / 6
    noise_sigma: float = 0.005
    condition_mode: str = "assembled"
    freeze_encoder: bool = False
    mask: MaskSpec = field(default_factory=MaskSpec)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        self.crop_ratio = tuple(self.crop_ratio)
        if self.condition_mode not in ("assembled", "global_only"):
            raise ValueError(f"unknown condition_mode {self.condition_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_ratio"] = list(self.crop_ratio)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return build_dataclass(cls, d)

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        cfg = cls(epochs=40, batch_size=32, checkpoint_every=10, model=ModelConfig.tiny())
        return dataclasses.replace(cfg, **overrides)


@dataclass
class SamplerConfig:
    num_steps: int = 50
    eta: float = 0.0
    mode: str = "conditional"
    clip_x0: Optional[float] = 5.0

    def __post_init__(self):
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ValueError("clip_x0 must be positive or None")
        if self.eta != 0.0:
            raise ValueError("only deterministic DDIM (eta = 0) is supported")
        if self.mode not in ("conditional", "unconditional"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")


@dataclass
class InpaintConfig:
    num_steps: int = 50
    resample_count: int = 1
    clip_x0: Optional[float] = 5.0

    def __post_init__(self):
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ValueError("clip_x0 must be positive or None")


@dataclass
class AugmentConfig:
    t_s: int = 500
    ratio: float = 1.0

    def __post_init__(self):
        if self.ratio < 0:
            raise ValueError("augment-to-real ratio must be non-negative")


@dataclass
class EvalConfig:
    probe_epochs: int = 100
    probe_lr: float = 0.1
    finetune_epochs: int = 100
    finetune_lr_start: float = 3e-4
    finetune_lr_end: float = 1e-5
    fraction: float = 1.0
    batch_size: int = 64


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    inpaint: InpaintConfig = field(default_factory=InpaintConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def build_dataclass(cls, data: dict, prefix: str = ""):
    """Construct ``cls`` from a nested dict, rejecting unknown keys by their dotted path."""
    if not isinstance(data, dict):
        raise ConfigError(f"config section {prefix.rstrip('.') or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {prefix}{key}")
        sub = _dataclass_type(cls, key)
        kwargs[key] = build_dataclass(sub, value, f"{prefix}{key}.") if sub else value
    return cls(**kwargs)


def _dataclass_type(cls, name: str):
    nested = {
        (TrainConfig, "mask"): MaskSpec, (TrainConfig, "diffusion"): DiffusionConfig,
        (TrainConfig, "model"): ModelConfig, (RunConfig, "train"): TrainConfig,
        (RunConfig, "sampler"): SamplerConfig, (RunConfig, "inpaint"): InpaintConfig,
        (RunConfig, "augment"): AugmentConfig, (RunConfig, "eval"): EvalConfig,
    }
    return nested.get((cls, name))


def parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a nested dict (values parsed as YAML scalars)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = parse_value(text)
    return data


def load_run_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                    base: Optional[dict] = None) -> RunConfig:
    data: dict = json.loads(json.dumps(base)) if base else {}
    if path:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        _merge(data, loaded)
    apply_overrides(data, overrides or [])
    return build_dataclass(RunConfig, data)


def _merge(dst: dict, src: dict) -> None:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _merge(dst[k], v)
        else:
            dst[k] = v


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
