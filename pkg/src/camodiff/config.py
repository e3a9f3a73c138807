"""Run configuration: one dataclass per section, loaded from YAML or JSON.

Unknown keys are rejected with their dotted name so a typo never silently
falls back to a default.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    image_size: int = 64
    noise_size: int = 64
    band_width: int = 1


@dataclass
class ScheduleConfig:
    T: int = 1000
    kind: str = "cosine"
    b: float = 0.1


@dataclass
class EncoderConfig:
    widths: tuple = (16, 32, 64, 128)
    d0: int = 64
    dc: int = 16


@dataclass
class BDLUConfig:
    enabled: bool = True
    r: int = 2
    de: int = 16
    boundary_selection: bool = True
    lookup: bool = True


@dataclass
class CPConfig:
    enabled: bool = True
    mask_variant: str = "b"
    threshold: float = 0.5
    pad: int = 4
    # fraction of training samples that see the empty first-round mask
    zero_mask_prob: float = 0.25


@dataclass
class DenoiserConfig:
    widths: tuple = (32, 64, 96, 128)
    time_dim: int = 64


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    w_mse: float = 1.0
    w_bce: float = 1.0
    w_iou: float = 1.0
    w_edge: float = 1.0
    checkpoint_every: int = 0


@dataclass
class SamplerConfig:
    steps: int = 4
    eta: float = 0.0
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bdlu: BDLUConfig = field(default_factory=BDLUConfig)
    cp: CPConfig = field(default_factory=CPConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d = self.data
        _require(d.noise_size % 8 == 0, "data.noise_size", "must be divisible by 8")
        _require(d.image_size % 32 == 0, "data.image_size", "must be divisible by 32")
        _require(d.band_width >= 1, "data.band_width", "must be >= 1")
        s = self.schedule
        _require(s.T >= 2, "schedule.T", "must be >= 2")
        _require(s.kind in ("linear", "cosine"), "schedule.kind", "must be linear or cosine")
        _require(s.b > 0, "schedule.b", "must be positive")
        _require(len(self.encoder.widths) == 4, "encoder.widths", "needs 4 entries")
        _require(len(self.denoiser.widths) == 4, "denoiser.widths", "needs 4 entries")
        _require(self.bdlu.r >= 1, "bdlu.r", "must be >= 1")
        c = self.cp
        _require(c.mask_variant in ("a", "b", "c"), "cp.mask_variant", "must be a, b or c")
        _require(0 < c.threshold < 1, "cp.threshold", "must lie in (0, 1)")
        _require(c.pad >= 0, "cp.pad", "must be >= 0")
        _require(0 <= c.zero_mask_prob <= 1, "cp.zero_mask_prob", "must lie in [0, 1]")
        t = self.trainer
        _require(t.batch_size >= 1, "trainer.batch_size", "must be >= 1")
        _require(t.epochs >= 0, "trainer.epochs", "must be >= 0")
        _require(t.lr >= 0, "trainer.lr", "must be >= 0")
        for w in ("w_mse", "w_bce", "w_iou", "w_edge"):
            _require(getattr(t, w) >= 0, f"trainer.{w}", "must be >= 0")
        _require(self.sampler.steps >= 1, "sampler.steps", "must be >= 1")
        _require(0 <= self.sampler.eta <= 1, "sampler.eta", "must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for section in out.values():
            for k, v in section.items():
                if isinstance(v, tuple):
                    section[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for name, values in raw.items():
            if name not in sections:
                raise ConfigError(f"unknown config key: {name}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {name} must be a mapping")
            section_cls = sections[name].default_factory
            known = {f.name: f for f in dataclasses.fields(section_cls)}
            parsed = {}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"unknown config key: {name}.{key}")
                default = known[key].default
                parsed[key] = _coerce(value, default, f"{name}.{key}")
            kwargs[name] = section_cls(**parsed)
        return cls(**kwargs)

    def override(self, **dotted) -> "RunConfig":
        """Copy with ``section__key=value`` overrides applied."""
        raw = self.to_dict()
        for k, v in dotted.items():
            section, key = k.split("__", 1)
            raw.setdefault(section, {})[key] = v
        return RunConfig.from_dict(raw)


def _require(ok: bool, key: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"invalid config value {key}: {msg}")


def _coerce(value, default, key):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"invalid config value {key}: expected a boolean")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"invalid config value {key}: expected a list")
        return tuple(int(v) for v in value)
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid config value {key}: expected {type(default).__name__}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text()
    raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return RunConfig.from_dict(raw)
