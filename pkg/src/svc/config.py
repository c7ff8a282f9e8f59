"""Run configuration: one YAML file, validated on load, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dsp import DSPError, SpectralScaleSet
from .features import FeatureConfig
from .losses import LossError, LossWeights
from .nets import ContextStackConfig, DiscriminatorConfig, GeneratorConfig, ModelConfig, NetError
from .training import LossConfig, TrainConfig, TrainingError, config_hash

PROVIDERS = ("builtin", "svcf")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    sample_rate: int = 16000
    seed: int = 0
    precision: str = "f32"
    corpus_root: str | None = None
    feature_provider: str = "builtin"
    feature_dir: str | None = None
    output_dir: str = "runs/svc"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "RunConfig":
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.feature_provider not in PROVIDERS:
            raise ConfigError(f"feature_provider must be one of {PROVIDERS}, got {self.feature_provider!r}")
        if self.feature_provider == "svcf" and not self.feature_dir:
            raise ConfigError("feature_provider 'svcf' needs feature_dir")
        if self.features.hop != self.model.generator.hop:
            raise ConfigError(f"features.hop {self.features.hop} ≠ product of upsample_stages "
                              f"{self.model.generator.hop}")
        if self.model.phonetic_dim <= 0:
            raise ConfigError("model.phonetic_dim must be positive")
        return self

    def model_hash(self) -> bytes:
        """Hash of everything that shapes the trained weights' meaning."""
        return config_hash({"sample_rate": self.sample_rate, "features": to_dict(self.features),
                            "model": to_dict(self.model)})


def _convert(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = typing.get_origin(tp)
    if tp is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(value)
    if tp is list or origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return list(value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def _build(cls, data, where: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}" if where else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, DSPError, LossError, NetError, TrainingError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def from_dict(data: dict) -> RunConfig:
    if isinstance(data, dict) and isinstance(data.get("train"), dict) and "seed" in data["train"]:
        raise ConfigError("train.seed is derived; set the top-level seed instead")
    return with_seed(_build(RunConfig, data), None).validate()


def with_seed(cfg: RunConfig, seed: int | None) -> RunConfig:
    """Apply a seed override; the training sampler always follows the top-level seed."""
    seed = cfg.seed if seed is None else seed
    return dataclasses.replace(cfg, seed=seed, train=dataclasses.replace(cfg.train, seed=seed))


def load_config(path=None) -> RunConfig:
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: {e}") from e
    return from_dict(data or {})


def to_dict(obj) -> dict:
    def plain(v):
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(obj))


def dump_config(cfg: RunConfig, path=None) -> str:
    data = to_dict(cfg)
    data["train"].pop("seed", None)
    text = yaml.safe_dump(data, sort_keys=False)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


__all__ = ["RunConfig", "ConfigError", "load_config", "from_dict", "dump_config", "to_dict",
           "FeatureConfig", "ModelConfig", "ContextStackConfig", "GeneratorConfig", "DiscriminatorConfig",
           "TrainConfig", "LossConfig", "LossWeights", "SpectralScaleSet"]
