"""Run configuration: defaults < config file < command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .anchors import make_layer_specs
from .datagen import SceneSpec
from .model import HeadConfig, NetworkSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # loss
    alpha1: float = 1.0
    alpha2: float = 1.5
    neg_pos_ratio: float = 3.0
    match_iou: float = 0.5
    force_match: bool = True
    # optimizer / schedule
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_at: float = 0.75      # fraction of `steps` after which lr is multiplied by lr_decay
    lr_decay: float = 0.1
    warmup_steps: int = 0
    batch_size: int = 16
    steps: int = 2000
    checkpoint_every: int = 1000
    # patch sampler
    sample_overlaps: list = field(default_factory=lambda: [0.7, 0.9])
    crop_scale: list = field(default_factory=lambda: [0.3, 1.0])
    crop_aspect: list = field(default_factory=lambda: [0.5, 2.0])
    # inference
    score_thresh: float = 0.05
    nms_iou: float = 0.45
    top_k: int = 200
    # model
    n_classes: int = 3
    n_bins: int = 8
    pose_sharing: str = "share"
    input_size: int = 64
    in_channels: int = 1
    channels: list = field(default_factory=lambda: [16, 32, 64, 64])
    extra_channels: list = field(default_factory=lambda: [64])
    aspect_ratios: list = field(default_factory=lambda: [1.0, 2.0, 0.5])
    s_min: float = 0.28
    s_max: float = 0.6
    extra_scale_box: bool = False
    # data
    count: int = 2000
    min_objects: int = 1
    max_objects: int = 4
    object_scale: list = field(default_factory=lambda: [0.2, 0.42])
    noise: float = 0.06
    data_seed: int = 0
    seed: int = 0

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls().updated(d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping of key: value")
        return cls.from_dict(data)

    def updated(self, overrides: dict) -> "RunConfig":
        unknown = sorted(set(overrides) - set(self.keys()))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        values = dataclasses.asdict(self)
        for k, v in overrides.items():
            values[k] = _coerce(k, v, values[k])
        out = RunConfig(**values)
        out.validate()
        return out

    def validate(self) -> None:
        if self.pose_sharing not in ("share", "separate"):
            raise ConfigError(f"pose_sharing must be 'share' or 'separate', got {self.pose_sharing!r}")
        if self.n_bins < 1 or self.n_classes < 1:
            raise ConfigError("n_bins and n_classes must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not 0 < self.s_min <= self.s_max <= 1:
            raise ConfigError("need 0 < s_min <= s_max <= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    # --- derived objects -------------------------------------------------
    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(self.input_size, self.in_channels, tuple(self.channels), tuple(self.extra_channels))

    def layer_specs(self) -> list:
        return make_layer_specs(self.network_spec().grid_sizes(), self.aspect_ratios, self.s_min, self.s_max,
                                self.extra_scale_box)

    def head_config(self) -> HeadConfig:
        return HeadConfig(self.n_classes, self.n_bins, self.pose_sharing,
                          tuple(ls.boxes_per_cell for ls in self.layer_specs()))

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(self.input_size, self.n_classes, self.min_objects, self.max_objects,
                         tuple(self.object_scale), 0.3, self.noise, self.data_seed)


def _coerce(key, value, default):
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = yaml.safe_load(value if value.startswith("[") else f"[{value}]")
            elem = type(default[0]) if default else float
            return [elem(v) for v in value]
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_overrides(pairs) -> dict:
    """``["lr=0.01", "n_bins=24"]`` -> dict (values coerced later)."""
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"override must look like key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out
