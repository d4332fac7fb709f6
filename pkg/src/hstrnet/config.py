"""Configuration tree, JSON round-tripping and dotted-path overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

VARIANTS = ("b", "i", "d", "full")


class ConfigError(ValueError):
    pass


@dataclass
class MotionConfig:
    widths: tuple[int, int, int] = (240, 150, 90)
    scales: tuple[int, int, int] = (4, 2, 1)
    # append LR and REF to the inputs of blocks 1 and 2 (7 -> 13 channels)
    feed_frames: bool = False


@dataclass
class ContextConfig:
    channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    # additive per-tap offsets predicted on top of the flow, zero-initialised
    learned_offsets: bool = False


@dataclass
class PatchMatchConfig:
    channels: tuple[int, int, int] = (48, 96, 192)
    patch_size: int = 4
    window_size: int = 3
    heads: int = 1
    mlp_ratio: int = 2
    # literal triple product without softmax, scaling or position bias
    raw_eq1: bool = False
    tied_qkv: bool = False


@dataclass
class FusionConfig:
    down: tuple[int, int, int, int] = (32, 64, 144, 304)
    up: tuple[int, int, int, int] = (128, 64, 32, 16)


@dataclass
class ModelConfig:
    variant: str = "full"
    motion: MotionConfig = field(default_factory=MotionConfig)
    context: ContextConfig = field(default_factory=ContextConfig)
    patchmatch: PatchMatchConfig = field(default_factory=PatchMatchConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    degrade_factor: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")

    @property
    def uses_patchmatch(self) -> bool:
        return self.variant == "full"

    @property
    def deformable_context(self) -> bool:
        return self.variant in ("d", "full")

    @property
    def bidirectional_fusion(self) -> bool:
        # the general-purpose baseline feeds both warped frames to the fusion net
        return self.variant == "b"

    @property
    def feed_frames(self) -> bool:
        return self.motion.feed_frames or self.variant == "b"


@dataclass
class TrainConfig:
    # optimizer and batch size are not given by the original recipe
    lr: float = 1e-5
    epochs: int = 62
    batch_size: int = 16
    max_steps: int | None = None
    crop: int = 128
    grad_clip: float | None = 1.0
    ckpt_interval: int = 1000
    workers: int = 0
    index: str | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")


@dataclass
class EvalConfig:
    protocol: str = "septuplet"
    metric_space: str = "rgb"
    # frame-sequence corpora are resized to this (width, height) first; null disables
    sequence_size: tuple[int, int] | None = (672, 380)
    index: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(cls, data: dict, prefix: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        sub = _dataclass_type(known[key].type)
        if sub is not None:
            kwargs[key] = from_dict(sub, value, prefix + key + ".")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


_NESTED = {
    "MotionConfig": MotionConfig,
    "ContextConfig": ContextConfig,
    "PatchMatchConfig": PatchMatchConfig,
    "FusionConfig": FusionConfig,
    "ModelConfig": ModelConfig,
    "TrainConfig": TrainConfig,
    "EvalConfig": EvalConfig,
}


def _dataclass_type(annotation):
    if isinstance(annotation, str):
        return _NESTED.get(annotation)
    return annotation if dataclasses.is_dataclass(annotation) else None


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return data


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = to_dict(RunConfig())
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        # validates keys before merging
        from_dict(RunConfig, user)
        data = _merge(data, user)
    data = apply_overrides(data, overrides or [])
    return from_dict(RunConfig, data)


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
