"""Run configuration: one JSON document with world / model / data / train /
sample / metrics sections, overridable by dotted-path flags."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .flowmatch import TrainConfig
from .metrics import Protocol
from .mmdit import ModelConfig
from .sampler import SampleSpec
from .serialize import canonical_json
from .synthdata import WorldConfig

_WORLD_DIMS = ("latent_len", "latent_dim", "video_len", "video_dim", "text_dim", "caption_dim",
               "sync_dim")


@dataclass(frozen=True)
class DataConfig:
    n: int = 120
    test_fraction: float = 0.25
    qc_threshold: float = 0.2
    scorer_seed: int = 0

    def validate(self) -> "DataConfig":
        if self.n < 1:
            raise ConfigError(f"data.n must be >= 1, got {self.n}")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"data.test_fraction must lie in [0, 1), got {self.test_fraction}")
        return self


@dataclass(frozen=True)
class MetricsConfig:
    suite_seed: int = 0
    clip_seconds: float = 9.1
    window_seconds: float = 4.8
    kl_direction: str = "ref||gen"
    stereo: bool = True

    def validate(self) -> "MetricsConfig":
        if self.kl_direction not in ("ref||gen", "gen||ref"):
            raise ConfigError(f"metrics.kl_direction must be 'ref||gen' or 'gen||ref', "
                              f"got {self.kl_direction!r}")
        if not 0 < self.window_seconds <= self.clip_seconds:
            raise ConfigError("metrics.window_seconds must lie in (0, clip_seconds]")
        return self

    def protocol(self, threads: int = 1) -> Protocol:
        return Protocol(self.clip_seconds, self.window_seconds, self.kl_direction, self.stereo, threads)


@dataclass(frozen=True)
class RunConfig:
    """``model`` holds overrides on top of the toy model sized to the world."""

    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: Mapping[str, Any] = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleSpec = field(default_factory=SampleSpec)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def model_config(self) -> ModelConfig:
        clash = sorted(set(self.model) & set(_WORLD_DIMS))
        if clash:
            raise ConfigError(f"model.{clash[0]} is fixed by the world; set world.{clash[0]} instead")
        try:
            return self.world.model_config(**self.model)
        except TypeError as exc:
            raise ConfigError(f"bad model override: {exc}") from None

    def validate(self) -> "RunConfig":
        self.world.validate()
        self.model_config()
        self.data.validate()
        self.train.validate()
        self.sample.validate()
        self.metrics.validate()
        return self

    def to_dict(self) -> dict:
        return {"seed": self.seed, "world": self.world.to_dict(), "model": dict(self.model),
                "data": dataclasses.asdict(self.data), "train": self.train.to_dict(),
                "sample": self.sample.to_dict(), "metrics": dataclasses.asdict(self.metrics)}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        return cls(
            seed=seed,
            world=WorldConfig.from_dict(d.get("world", {})),
            model=dict(d.get("model", {})),
            data=_section(DataConfig, d.get("data", {}), "data"),
            train=TrainConfig.from_dict(d.get("train", {})),
            sample=SampleSpec.from_dict(d.get("sample", {})),
            metrics=_section(MetricsConfig, d.get("metrics", {}), "metrics"),
        ).validate()

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with every stream (world, train, sample) reseeded."""
        return dataclasses.replace(
            self, seed=seed, world=dataclasses.replace(self.world, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            sample=dataclasses.replace(self.sample, seed=seed))


def _section(cls, d: Mapping, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {name} config key(s): {sorted(unknown)}")
    return cls(**d).validate()


def parse_value(text: str):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` assignments to a nested dict (copied)."""
    out = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override path {path!r}: {k!r} is not a section")
            node = child
        node[keys[-1]] = parse_value(value)
    return out


def load_run_config(path: str | Path | None = None, overrides: list[str] | None = None,
                    seed: int | None = None) -> RunConfig:
    base: dict = {}
    if path is not None:
        try:
            base = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    merged = apply_overrides(_deep_merge(RunConfig().to_dict(), base), overrides or [])
    cfg = RunConfig.from_dict(merged)
    return cfg.with_seed(seed) if seed is not None else cfg


def _deep_merge(a: dict, b: Mapping) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, Mapping) and isinstance(out.get(k), dict) else v
    return out
