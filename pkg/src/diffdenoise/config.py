"""Declarative experiment configuration: schema, validation, canonical
hashing, and YAML round-trip.

Unknown keys are rejected at every level, and the hash is computed over a
canonical sorted-key JSON rendering, so semantically identical files hash
identically regardless of key order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .bsn import BsnConfig
from .diffusion import DiffusionConfig
from .distill import DistillConfig
from .noise import NoiseSpec


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass
class DataConfig:
    kind: str = "phantom"  # phantom | local
    image_count: int = 24
    image_size: int = 96
    patch_size: int = 64
    stride: int = 64
    normalize: str = "per_image"  # per_image | none
    splits: dict = field(default_factory=lambda: {"train": 0.70, "val": 0.10, "test": 0.20})
    local_paths: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("phantom", "local"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.normalize not in ("per_image", "none"):
            raise ConfigError(f"unknown normalize mode {self.normalize!r}")
        if self.kind == "phantom" and self.image_count < 1:
            raise ConfigError("image_count must be >= 1")
        if self.kind == "local" and not self.local_paths:
            raise ConfigError("local data requires local_paths")
        total = sum(self.splits.values())
        if not 0.999 <= total <= 1.001:
            raise ConfigError("split fractions must sum to 1")
        if set(self.splits) != {"train", "val", "test"}:
            raise ConfigError("splits must define train, val and test")


@dataclass
class SrdsConfig:
    steps: int = 50
    mode: str = "srds"  # srds | single | random-pair
    stability_seeds: int = 20
    stability_images: int = 4

    def __post_init__(self):
        if self.mode not in ("srds", "single", "random-pair"):
            raise ConfigError(f"unknown sampling mode {self.mode!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    noise: list = field(default_factory=lambda: [NoiseSpec(family="gaussian", sigma=6 / 255)])
    bsn: BsnConfig = field(default_factory=lambda: BsnConfig(blind_spot_size=0))
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    srds: SrdsConfig = field(default_factory=SrdsConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    iterations: int = 1
    ablation: bool = False
    seed_stability: bool = False

    def __post_init__(self):
        if not self.name:
            raise ConfigError("name must not be empty")
        if not self.output_dir:
            raise ConfigError("output_dir must not be empty")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.noise:
            raise ConfigError("at least one noise regime is required")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))


_BLOCK_TYPES = {
    "data": DataConfig,
    "bsn": BsnConfig,
    "diffusion": DiffusionConfig,
    "srds": SrdsConfig,
    "distill": DistillConfig,
}


def _build_block(cls, payload: dict, context: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{context} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("experiment config must be a mapping")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    kwargs: dict = {}
    for key, value in payload.items():
        if key in _BLOCK_TYPES:
            kwargs[key] = _build_block(_BLOCK_TYPES[key], value, key)
        elif key == "noise":
            if not isinstance(value, list) or not value:
                raise ConfigError("noise must be a non-empty list of specs")
            try:
                kwargs[key] = [NoiseSpec.from_dict(entry) for entry in value]
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid noise entry: {exc}") from exc
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_dict(config: ExperimentConfig) -> dict:
    d = dataclasses.asdict(config)
    d["noise"] = [spec.to_dict() for spec in config.noise]
    return d


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def block_hash(payload) -> str:
    """Stable hash of any JSON-representable config slice."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    try:
        payload = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    config = config_from_dict(payload)
    if seed_override is not None:
        config = config.with_seed(seed_override)
    return config


def dump_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True))
