"""JSON pipeline configuration with strict key checking and flag/env overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .features import DEFAULT_SPEC, FrameSpec
from .trainer import BANK_SIZES, TrainConfig

SEED_ENV = "PTTS_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProsodyDefaults:
    dur_factor: float = 1.0
    f0_factor: float = 1.0
    force: bool = False


@dataclass(frozen=True)
class StudyConfig:
    bank_sizes: tuple = BANK_SIZES
    steps: int = 500


@dataclass(frozen=True)
class PipelineConfig:
    corpus_dir: str | None = None
    out_dir: str = "out"
    cache_dir: str | None = None        # defaults to <out_dir>/cache
    seed: int = 0
    workers: int = 1
    frame: FrameSpec = DEFAULT_SPEC
    train: TrainConfig = field(default_factory=TrainConfig)
    prosody: ProsodyDefaults = ProsodyDefaults()
    context_study: StudyConfig = StudyConfig()

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.out_dir) / "cache"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["context_study"]["bank_sizes"] = list(self.context_study.bank_sizes)
        return d


_SECTIONS = {"frame": FrameSpec, "train": TrainConfig, "prosody": ProsodyDefaults,
             "context_study": StudyConfig}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    if cls is StudyConfig and "bank_sizes" in data:
        data = dict(data, bank_sizes=tuple(data["bank_sizes"]))
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict) -> PipelineConfig:
    data = dict(data)
    for name, cls in _SECTIONS.items():
        if name in data:
            data[name] = _build(cls, data[name], name)
    cfg = _build(PipelineConfig, data, "config")
    return validate(cfg)


def validate(cfg: PipelineConfig) -> PipelineConfig:
    if cfg.frame.shift != 80 or cfg.frame.mel_bins != 80:
        raise ConfigError("frame: the model is built for a 5 ms shift and 80 mel bins")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    bad = [b for b in cfg.context_study.bank_sizes if b not in BANK_SIZES]
    if bad:
        raise ConfigError(f"context_study: bank sizes {bad} not in {BANK_SIZES}")
    if cfg.context_study.steps <= 0:
        raise ConfigError("context_study: steps must be positive")
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int):
        raise ConfigError(f"seed must be an integer, got {cfg.seed!r}")
    return cfg


def load_config(path=None, overrides: dict | None = None, env=None) -> PipelineConfig:
    """Config file, then flag overrides (dotted keys like ``train.max_steps``), then PTTS_SEED."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        data["seed"] = seed
        if isinstance(data.get("train"), dict):
            data["train"]["seed"] = seed
    cfg = from_dict(data)
    # one seed drives everything unless the train section pins its own
    if "seed" not in data.get("train", {}):
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    return cfg
