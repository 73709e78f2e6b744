"""Run configuration: dotted ``key = value`` files, built-in profiles, validation."""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .losses import LossWeights
from .model import ModelConfig
from .sampler import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys, unparseable values and constraint violations."""


@dataclass
class DataConfig:
    n_clips: int = 256
    n_frames: int = 64
    fps: float = 30.0
    tempo_range: tuple = (90.0, 150.0)
    seed: int = 0

    def __post_init__(self):
        self.tempo_range = tuple(float(v) for v in self.tempo_range)
        if self.n_clips < 1:
            raise ValueError("data.n_clips must be >= 1")
        if self.n_frames < 3:
            raise ValueError("data.n_frames must be >= 3")
        if self.fps <= 0:
            raise ValueError("data.fps must be > 0")
        if len(self.tempo_range) != 2 or not 0 < self.tempo_range[0] <= self.tempo_range[1]:
            raise ValueError(f"data.tempo_range must be (low, high) with 0 < low <= high, got {self.tempo_range}")


@dataclass
class RetrievalConfig:
    k: int = 2
    lambda_len: float = 1.0
    text_dim: int = 64

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("retrieval.k must be >= 1")
        if self.lambda_len < 0:
            raise ValueError("retrieval.lambda_len must be >= 0")
        if self.text_dim < 1:
            raise ValueError("retrieval.text_dim must be >= 1")


@dataclass
class EvalConfig:
    sigma: float = 0.1
    feature_dim: int = 32
    metric_seed: int = 0
    n_clips: int = 128
    steps: int = 300
    seed: int = 1000

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("eval.sigma must be > 0")
        if self.feature_dim < 1 or self.n_clips < 2 or self.steps < 1:
            raise ValueError("eval.feature_dim, eval.n_clips and eval.steps must be positive (n_clips >= 2)")


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "retrieval": RetrievalConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "sample": SamplerConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    profile: str = "paper"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SamplerConfig = field(default_factory=SamplerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def flat(self) -> dict:
        out = {"profile": self.profile}
        for name in SECTIONS:
            for f in fields(getattr(self, name)):
                out[f"{name}.{f.name}"] = getattr(getattr(self, name), f.name)
        return out

    def echo(self) -> str:
        """Resolved config as a loadable key = value document."""
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.flat().items())


# full-size values live in the dataclass defaults; the desk profile shrinks them
PROFILES = {
    "paper": {
        "model.n_blocks": 20, "model.latent_dim": 512, "model.n_heads": 8, "model.ffn_dim": 1024,
        "model.text_dim": 768, "model.music_dim": 4800,
        "sample.steps": 200, "train.batch_size": 32, "train.epochs": 5000,
    },
    "desk": {
        "data.n_clips": 4, "data.n_frames": 64,
        "model.n_blocks": 2, "model.latent_dim": 64, "model.n_heads": 4, "model.ffn_dim": 128,
        "model.text_dim": 64, "model.music_dim": 32,
        "sample.steps": 50, "train.batch_size": 8, "train.epochs": 2000,
        "train.lr": 1e-3, "train.warmup_steps": 100,
        "eval.n_clips": 128, "eval.steps": 300,
    },
}


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        pass
    if "," in raw:
        return tuple(_parse_value(p) for p in raw.split(",") if p.strip())
    return raw


def _coerce(key: str, value, kind):
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if kind is str:
            return str(value)
        if kind is tuple:
            return tuple(value) if isinstance(value, (tuple, list)) else (value,)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None
    return value


def _field_types(cls) -> dict:
    hints = get_type_hints(cls)
    out = {}
    for f in fields(cls):
        h = hints[f.name]
        out[f.name] = h if h in (bool, int, float, str, tuple) else type(f.default)
    return out


def parse_document(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines with dotted keys; ``[section]`` headers prefix later keys."""
    values, prefix = {}, ""
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            prefix = line[1:-1].strip() + "."
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        values[key if key == "profile" else prefix + key] = _parse_value(raw)
    return values


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = _parse_value(raw)
    return out


def resolve(values: dict) -> RunConfig:
    """Build and validate a RunConfig from a flat dotted-key mapping (profile applied first)."""
    profile = values.get("profile", "paper")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    merged = {**PROFILES[profile], **{k: v for k, v in values.items() if k != "profile"}}
    per_section = {name: {} for name in SECTIONS}
    for key, value in merged.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")
        types = _field_types(SECTIONS[section])
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        per_section[section][name] = _coerce(key, value, types[name])
    built = {}
    for name, cls in SECTIONS.items():
        try:
            built[name] = cls(**per_section[name])
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None
    cfg = RunConfig(profile=profile, **built)
    if cfg.sample.mode != cfg.model.mode and "sample.mode" not in merged:
        cfg.sample = dataclasses.replace(cfg.sample, mode=cfg.model.mode)
    return cfg


def load_config(path=None, overrides=None, profile: str | None = None) -> RunConfig:
    """defaults <- profile <- file <- overrides; an explicit ``profile`` argument wins over the file."""
    values = {}
    if path is not None:
        values.update(parse_document(Path(path).read_text(encoding="utf-8"), str(path)))
    if profile is not None:
        values["profile"] = profile
    values.update(overrides if isinstance(overrides, dict) else parse_overrides(overrides))
    return resolve(values)
