"""Experiment configuration: nested dataclasses, JSON I/O and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .momentum import SmoothingConfig
from .nets import ExtractorConfig
from .synthdata import AugmentConfig, DomainShift, DomainSpec

DISCRIMINATOR_MODES = ("none", "binary", "class")


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    lr_fc: float = 6e-5
    lr_ds: float = 1e-4
    weight_decay: float = 0.01
    lr_warmup_iters: int = 100
    poly_power: float = 0.9
    lambda_adv: float = 1.0
    saturating_generator: bool = False
    # also fool D through live target features when they are not momentum features
    generator_target_branch: bool = False


@dataclass
class ScheduleConfig:
    warmup_iters: int = 1000
    iters_per_round: int = 2000
    rounds: int = 3

    @property
    def total_iters(self) -> int:
        return self.warmup_iters + self.rounds * self.iters_per_round


@dataclass
class DataConfig:
    num_common: int = 5
    include_source_private: bool = False
    include_target_private: bool = False
    min_objects: int = 2
    max_objects: int = 5
    n_source: int = 256
    n_target: int = 256
    n_test: int = 64
    augment: bool = True
    shift: DomainShift = field(default_factory=DomainShift)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)

    def domain_spec(self, image_size) -> DomainSpec:
        return DomainSpec(self.num_common, self.include_source_private, self.include_target_private,
                          tuple(image_size), self.min_objects, self.max_objects, self.shift)


@dataclass
class TrackingConfig:
    enabled: bool = True
    probe_count: int = 8
    stride: int = 1
    capacity: Optional[int] = 0  # snapshots retained; 0 keeps none beyond the running change
    band_cutoff: Optional[float] = None
    summary_window: Optional[int] = 500  # trailing changes averaged into the run summary


@dataclass
class ExperimentConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    discriminator_mode: str = "binary"
    head_hidden: int = 64  # width of the discriminator / similarity conv heads
    dynamic_weights: bool = True
    smoothing: SmoothingConfig = field(default_factory=lambda: SmoothingConfig(True, True, 0.999))
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 4
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    output_dir: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        validate(self)
        return self

    def to_dict(self) -> dict:
        return _to_jsonable(self)

    def config_hash(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def variant_name(self) -> str:
        sm = self.smoothing
        return (f"{self.extractor.kind}-{self.discriminator_mode}"
                f"-dyn{int(self.dynamic_weights)}-pl{int(sm.mo_pl)}-fa{int(sm.mo_fa)}-m{sm.m:g}")


def validate(cfg: ExperimentConfig) -> None:
    if cfg.discriminator_mode not in DISCRIMINATOR_MODES:
        raise ConfigError(f"discriminator_mode must be one of {DISCRIMINATOR_MODES}, "
                          f"got {cfg.discriminator_mode!r}")
    if cfg.discriminator_mode == "none":
        if cfg.dynamic_weights:
            raise ConfigError("discriminator_mode=none forbids dynamic_weights: "
                              "there is no adversarial loss to weight")
        if cfg.smoothing.mo_fa:
            raise ConfigError("discriminator_mode=none forbids smoothing.mo_fa: "
                              "momentum features would feed no discriminator")
    s = cfg.schedule
    if s.rounds < 1:
        raise ConfigError(f"schedule.rounds must be >= 1, got {s.rounds}")
    if s.warmup_iters < 0 or s.iters_per_round < 1:
        raise ConfigError("schedule.warmup_iters must be >= 0 and iters_per_round >= 1")
    if cfg.head_hidden < 1:
        raise ConfigError("head_hidden must be >= 1")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    d = cfg.data
    if min(d.n_source, d.n_target, d.n_test) < 1:
        raise ConfigError("data.n_source, n_target and n_test must be >= 1")
    if cfg.tracking.stride < 1 or cfg.tracking.probe_count < 1:
        raise ConfigError("tracking.stride and tracking.probe_count must be >= 1")
    if cfg.tracking.capacity is not None and cfg.tracking.capacity < 0:
        raise ConfigError("tracking.capacity must be >= 0 or null")
    o = cfg.optim
    if o.lr_fc < 0 or o.lr_ds < 0 or o.weight_decay < 0:
        raise ConfigError("learning rates and weight decay must be nonnegative")


# -- dict <-> dataclass ------------------------------------------------------------------

def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    proto = cls()
    valid = [f.name for f in fields(cls)]
    kwargs = {}
    for key, value in data.items():
        if key not in valid:
            where = f"{path}." if path else ""
            raise ConfigError(f"unknown config key '{where}{key}'; valid keys: {', '.join(valid)}")
        current = getattr(proto, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value, f"{path}.{key}" if path else key)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments to a plain config dict (values parsed as JSON if possible)."""
    out = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return out


def load_config(path, overrides: Optional[list[str]] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(apply_overrides(data, overrides or []))


def with_changes(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy with dot-path changes, e.g. ``with_changes(cfg, **{"smoothing.m": 0.0})``."""
    return from_dict(apply_overrides(cfg.to_dict(), [f"{k}={json.dumps(v)}" for k, v in changes.items()]))


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# Small enough that a full warm-up + two-round run finishes in a few CPU minutes at 64x64,
# with a learning rate and adversarial weight that let a randomly initialised model learn.
DESK_PRESET = {
    "extractor.embed_dim": 32,
    "extractor.depth": 2,
    "extractor.heads": 2,
    "head_hidden": 32,
    "schedule.warmup_iters": 400,
    "schedule.iters_per_round": 300,
    "schedule.rounds": 2,
    "data.n_source": 128,
    "data.n_target": 128,
    "data.n_test": 32,
    "optim.lr_fc": 3e-3,
    "optim.lr_warmup_iters": 50,
    "optim.lambda_adv": 0.01,
}


def desk_config(**changes) -> ExperimentConfig:
    """Defaults overlaid with :data:`DESK_PRESET`, then ``changes``."""
    return with_changes(ExperimentConfig(), **{**DESK_PRESET, **changes})
