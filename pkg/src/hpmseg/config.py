"""Run configuration: nested dataclasses, YAML files, dotted-key overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    grid_size: int = 64
    num_cases: int = 32
    num_organs: int = 4
    noise_sigma: float = 0.0
    # organ placement jitter around a shared layout; null = uniform random
    jitter: Optional[float] = 0.1
    body: bool = True
    spacing: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    # train / val / test fractions of num_cases
    split: List[float] = field(default_factory=lambda: [0.75, 0.0, 0.25])
    seed: int = 0
    clip_lo: float = 0.0
    clip_hi: float = 1.0
    crop: int = 64
    flip_prob: float = 0.5
    class_names: Optional[List[str]] = None
    report_classes: Optional[List[str]] = None


@dataclass
class ModelConfig:
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4
    predictor_dim: int = 64
    predictor_depth: int = 1
    predictor_heads: int = 2
    feature_size: int = 8


@dataclass
class MaskConfig:
    ratio: float = 0.75
    alpha0: float = 0.0
    alphaT: float = 0.5
    # False pins alpha to 0 (random masking only)
    guided: bool = True


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 4
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    # None -> 10% of epochs
    warmup_epochs: Optional[int] = None
    betas: List[float] = field(default_factory=lambda: [0.9, 0.95])
    ema_momentum: float = 0.999
    w_pred: float = 1.0
    norm_eps: float = 1e-6
    seed: int = 0
    # dataset splits whose images (labels ignored) are used for pretraining
    splits: List[str] = field(default_factory=lambda: ["train"])

    def warmup(self):
        return self.epochs // 10 if self.warmup_epochs is None else self.warmup_epochs


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 4
    base_lr: float = 8e-4
    weight_decay: float = 0.05
    warmup_epochs: Optional[int] = None
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    layer_decay: float = 0.75
    droppath_prob: float = 0.1
    freeze_encoder: bool = False
    seed: int = 0

    def warmup(self):
        return self.epochs // 10 if self.warmup_epochs is None else self.warmup_epochs


@dataclass
class EvalConfig:
    slices: List[int] = field(default_factory=lambda: [16, 32, 48])
    case: Optional[str] = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        d = self.data
        if len(d.split) != 3 or any(f < 0 for f in d.split):
            raise ConfigError("data.split must be three non-negative fractions")
        if sum(d.split) > 1.0 + 1e-9:
            raise ConfigError(f"data.split fractions sum to {sum(d.split)} > 1")
        if d.clip_lo >= d.clip_hi:
            raise ConfigError("data.clip_lo must be < data.clip_hi")
        if d.crop % self.model.patch_size:
            raise ConfigError(
                f"data.crop {d.crop} not divisible by model.patch_size {self.model.patch_size}"
            )
        if not 0.0 < self.mask.ratio < 1.0:
            raise ConfigError("mask.ratio must lie in (0, 1)")
        for k in ("alpha0", "alphaT"):
            if not 0.0 <= getattr(self.mask, k) <= 1.0:
                raise ConfigError(f"mask.{k} must lie in [0, 1]")
        p = self.pretrain
        if p.batch_size < 1 or self.finetune.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if p.warmup() >= p.epochs:
            raise ConfigError("pretrain.warmup_epochs must be < pretrain.epochs")
        if not 0.0 < self.finetune.layer_decay <= 1.0:
            raise ConfigError("finetune.layer_decay must lie in (0, 1]")
        if not p.splits or any(sp not in ("train", "val") for sp in p.splits):
            raise ConfigError("pretrain.splits must be a non-empty subset of [train, val]")
        if p.w_pred < 0:
            raise ConfigError("pretrain.w_pred must be >= 0")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        for section, values in (d or {}).items():
            if not hasattr(cfg, section):
                raise ConfigError(f"unknown config section {section!r}")
            for key, val in (values or {}).items():
                set_key(cfg, f"{section}.{key}", val)
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def diff(a: RunConfig, b: RunConfig):
    fa, fb = flatten(a.to_dict()), flatten(b.to_dict())
    return sorted(k for k in fa if fa[k] != fb[k])


def set_key(cfg: RunConfig, dotted: str, value):
    """Set ``section.key``; string values are parsed as YAML scalars/lists."""
    try:
        section, key = dotted.split(".", 1)
    except ValueError:
        raise ConfigError(f"config key {dotted!r} must be section.key") from None
    sec = getattr(cfg, section, None)
    if sec is None or not dataclasses.is_dataclass(sec):
        raise ConfigError(f"unknown config section {section!r}")
    names = {f.name for f in dataclasses.fields(sec)}
    if key not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    if isinstance(value, str):
        value = yaml.safe_load(value)
    current = getattr(sec, key)
    if isinstance(current, bool) and not isinstance(value, bool):
        raise ConfigError(f"{dotted} expects a boolean")
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    setattr(sec, key, value)
