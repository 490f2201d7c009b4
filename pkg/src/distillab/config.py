"""Declarative run configuration: strict JSON schema with documented defaults.

Every pipeline knob lives in one nested config; unknown keys are rejected
with their dotted path, and JSON syntax errors cite line/column. The
defaults reproduce the frozen desk-scale experiment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

__all__ = [
    "ConfigError",
    "RunConfig",
    "config_sha256",
    "default_config",
    "load_config",
    "parse_config",
    "to_dict",
]


class ConfigError(ValueError):
    """Configuration rejected; message cites the offending key or location."""


@dataclass
class DataSection:
    num_classes: int = 5
    train_per_class: int = 500
    test_per_class: int = 100
    channels: int = 1
    image_height: int = 16
    image_width: int = 16
    amplitude: float = 0.9
    amplitude_jitter: float = 0.1
    noise_std: float = 0.05
    orientations_deg: list | None = None
    frequencies: list | None = None


@dataclass
class DetectorSection:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    cutmix_alpha: float = 1.0
    hidden_sizes: list = field(default_factory=lambda: [128, 64])


@dataclass
class AutoencoderSection:
    mode: str = "mlp"  # "mlp" | "identity"
    latent_dim: int = 32
    hidden_size: int = 128
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 2e-3


@dataclass
class DenoiserSection:
    timesteps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.03
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    hidden_sizes: list = field(default_factory=lambda: [256, 256])
    time_embed_dim: int = 16
    label_embed_dim: int = 32
    label_dropout: float = 0.1


@dataclass
class DistillSection:
    ipc: int = 10
    beta: float = 0.9
    top_k: int = 2
    num_candidates: int = 20
    guidance_scale: float = 10.0
    strength: float = 0.7
    selection_mode: str = "tplus_s"
    fallback_policy: str = "best_confidence"
    kmeans_restarts: int = 10


@dataclass
class EvalSection:
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    hidden_sizes: list = field(default_factory=lambda: [128, 64])
    modes: list = field(default_factory=lambda: ["base", "top1", "sim", "tplus_s"])
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    sensitivity_top_k: list = field(default_factory=lambda: [1, 2, 4, 8])
    sensitivity_betas: list = field(default_factory=lambda: [0.5, 0.7, 0.9])


@dataclass
class RunConfig:
    master_seed: int = 0
    output_root: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTION_TYPES = {
    "data": DataSection,
    "detector": DetectorSection,
    "autoencoder": AutoencoderSection,
    "denoiser": DenoiserSection,
    "distill": DistillSection,
    "eval": EvalSection,
}


def _fill_section(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {path!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown config key {path}.{key}")
    obj = cls()
    for key, value in payload.items():
        default = getattr(obj, key)
        if default is not None and not isinstance(value, type(default)) and not (
            isinstance(default, float) and isinstance(value, int)
        ):
            raise ConfigError(
                f"config key {path}.{key} expects {type(default).__name__}, got {type(value).__name__}"
            )
        setattr(obj, key, float(value) if isinstance(default, float) else value)
    return obj


def parse_config(payload: dict) -> RunConfig:
    """Build a RunConfig from a parsed JSON object, rejecting unknown keys."""
    if not isinstance(payload, dict):
        raise ConfigError("top-level config must be an object")
    cfg = RunConfig()
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    for key in payload:
        if key not in top_fields:
            raise ConfigError(f"unknown config key {key}")
    for key, value in payload.items():
        if key in _SECTION_TYPES:
            setattr(cfg, key, _fill_section(_SECTION_TYPES[key], value, key))
        elif key == "master_seed":
            if not isinstance(value, int):
                raise ConfigError("config key master_seed expects int")
            cfg.master_seed = value
        elif key == "output_root":
            if not isinstance(value, str):
                raise ConfigError("config key output_root expects str")
            cfg.output_root = value
    return cfg


def load_config(path) -> RunConfig:
    """Parse a JSON config file; syntax errors cite line and column."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config parse error at line {e.lineno}, column {e.colno}: {e.msg}")
    return parse_config(payload)


def default_config() -> RunConfig:
    return RunConfig()


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_sha256(cfg: RunConfig) -> str:
    """Hash of the experiment-defining fields.

    Excludes output_root: where artifacts land does not influence their
    bytes, so two runs of one experiment share a run id and manifests
    regardless of location.
    """
    payload = to_dict(cfg)
    payload.pop("output_root")
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
