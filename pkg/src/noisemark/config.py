"""Run configuration: JSON files with strict (fail-closed) validation.

Every key must be known; unknown keys abort before any work starts. An
empty file yields the documented defaults: embed weights 100:80:20,
learning rate 1e-2, guidance 4.5, 120 iterations, 48-bit messages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .attacks import AttackPool, AttackTemplate, default_attack_pool
from .autoencoder import AutoencoderTrainConfig
from .codec import DecoderTrainConfig
from .diffusion import ModelConfig, TrainConfig
from .embedder import EmbedConfig
from .transforms import DEFAULT_TRANSFORM_SET, TRANSFORM_POINTS


class ConfigError(ValueError):
    """Raised on malformed or unknown configuration content."""


@dataclass
class DatasetConfig:
    n_images: int = 500
    resolution: int = 32
    seed: int = 11


@dataclass
class EvalConfig:
    n_images: int = 20
    embed_batch: int = 10  # images optimized jointly per embed call


@dataclass
class RunConfig:
    master_seed: int = 0
    k: int = 48
    output_dir: str = "runs/out"
    model_checkpoint: str = "artifacts/toy_diffusion.pt"
    decoder_checkpoint: str = "artifacts/toy_decoder.pt"
    autoencoder_checkpoint: str = "artifacts/toy_autoencoder.pt"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    attack_pool: AttackPool = field(default_factory=default_attack_pool)
    transforms: list[str] = field(default_factory=lambda: list(DEFAULT_TRANSFORM_SET))
    model: ModelConfig = field(default_factory=ModelConfig)
    train_model: TrainConfig = field(default_factory=TrainConfig)
    train_decoder: DecoderTrainConfig = field(default_factory=DecoderTrainConfig)
    train_autoencoder: AutoencoderTrainConfig = field(default_factory=AutoencoderTrainConfig)

    def snapshot(self) -> dict:
        def encode(obj):
            if is_dataclass(obj) and not isinstance(obj, type):
                return {k: encode(v) for k, v in asdict(obj).items()}
            if isinstance(obj, (list, tuple)):
                return [encode(v) for v in obj]
            return obj

        return encode(self)


_SKIP_FIELDS = {EmbedConfig: {"attack_pool"}}

# field name -> nested dataclass type (field.type is a string under
# deferred annotations, so nesting is declared explicitly)
_NESTED_TYPES = {
    "dataset": DatasetConfig,
    "eval": EvalConfig,
    "model": ModelConfig,
    "train_model": TrainConfig,
    "train_decoder": DecoderTrainConfig,
    "train_autoencoder": AutoencoderTrainConfig,
}


def _build_dataclass(dc_type, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    skip = _SKIP_FIELDS.get(dc_type, set())
    known = {f.name: f for f in fields(dc_type) if f.name not in skip}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {sorted(unknown)}; known: {sorted(known)}")
    kwargs = {}
    for name in known:
        if name not in data:
            continue
        value = data[name]
        sub = f"{path}.{name}" if path else name
        if name in _NESTED_TYPES and dc_type is RunConfig:
            kwargs[name] = _build_dataclass(_NESTED_TYPES[name], value, sub)
        else:
            kwargs[name] = value
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _build_attack_pool(data, path: str) -> AttackPool:
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(data) - {"templates", "weights"}
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    templates = []
    for i, t in enumerate(data.get("templates", [])):
        unknown = set(t) - {"kind", "intensity_range"}
        if unknown:
            raise ConfigError(f"{path}.templates[{i}]: unknown key(s) {sorted(unknown)}")
        templates.append(AttackTemplate(kind=t["kind"],
                                        intensity_range=tuple(t.get("intensity_range", (0.0, 0.0)))))
    if not templates:
        raise ConfigError(f"{path}: templates must be nonempty")
    try:
        return AttackPool(templates=templates, weights=list(data.get("weights", [])))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"top level must be an object, got {type(data).__name__}")
    data = dict(data)
    pool_data = data.pop("attack_pool", None)
    embed_data = data.pop("embed", None)
    transforms = data.pop("transforms", None)

    config = _build_dataclass(RunConfig, data, "")
    if embed_data is not None:
        config.embed = _build_dataclass(EmbedConfig, embed_data, "embed")
    if pool_data is not None:
        config.attack_pool = _build_attack_pool(pool_data, "attack_pool")
    config.embed.attack_pool = config.attack_pool
    if transforms is not None:
        bad = [t for t in transforms if t not in TRANSFORM_POINTS]
        if bad:
            raise ConfigError(f"transforms: unknown label(s) {bad}; known: {list(TRANSFORM_POINTS)}")
        config.transforms = list(transforms)
    return config


def load_config(path) -> RunConfig:
    """Parse and validate a JSON run config; empty file means all defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text().strip()
    if not text:
        return build_config({})
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return build_config(data)
