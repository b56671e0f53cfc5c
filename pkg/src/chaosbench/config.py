"""Experiment configuration: JSON files validated against the stage schemas, with the reference sizes as defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autoencoders import AEConfig
from .diagnostics import DiagConfig
from .models.registry import ABLATION_VARIANTS, ALL_TAGS, MAIN_MODELS, REFERENCE_SIZES
from .systems.dataset import CONFIG_TYPES, SYSTEMS
from .training import TrainConfig

STAGES = ("generate", "train-ae", "train", "evaluate", "diagnose", "ablate", "report")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    benchmark: str
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0])
    output_root: str = "runs"
    dataset: dict = field(default_factory=dict)
    autoencoder: dict = field(default_factory=dict)
    models: list = field(default_factory=lambda: list(MAIN_MODELS))
    width: int | None = None
    model_overrides: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=lambda: {"split": "val"})
    diagnostics: dict = field(default_factory=lambda: {"enabled": True})
    ablation: dict = field(default_factory=lambda: {"enabled": False})
    stages: list = field(default_factory=lambda: list(STAGES))

    # resolved views -------------------------------------------------------------
    @property
    def is_latent(self) -> bool:
        return self.benchmark in ("ks", "kf")

    def train_config(self, seed: int, overrides: dict | None = None) -> TrainConfig:
        params = dict(self.training)
        params.update(overrides or {})
        params["seed"] = seed
        return TrainConfig(**params)

    def ae_config(self) -> AEConfig:
        params = dict(self.autoencoder)
        params.setdefault("seed", self.seed)
        return AEConfig(**params)

    def diag_config(self) -> DiagConfig:
        params = {k: v for k, v in self.diagnostics.items() if k != "enabled"}
        params.setdefault("seed", self.seed)
        params.setdefault("split", self.evaluation.get("split", "val"))
        return DiagConfig(**params)

    @property
    def diagnostics_enabled(self) -> bool:
        return bool(self.diagnostics.get("enabled", True))

    @property
    def ablation_enabled(self) -> bool:
        return bool(self.ablation.get("enabled", False))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _check_keys(section: str, given: dict, allowed) -> None:
    extra = set(given) - set(allowed)
    if extra:
        raise ConfigError(f"{section}: unknown keys {sorted(extra)}")


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.benchmark not in SYSTEMS:
        raise ConfigError(f"benchmark must be one of {SYSTEMS}, got {cfg.benchmark!r}")
    if not isinstance(cfg.seed, int) or not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
        raise ConfigError("seed and seeds must be explicit integers")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds must be unique")
    if not cfg.models:
        raise ConfigError("model list is empty")
    bad = [m for m in cfg.models if m not in ALL_TAGS]
    if bad:
        raise ConfigError(f"unknown models {bad}")
    for m, ov in cfg.model_overrides.items():
        if m not in ALL_TAGS or not isinstance(ov, dict):
            raise ConfigError(f"model_overrides: bad entry {m!r}")
        _check_keys(f"model_overrides.{m}", ov, {"width", "depth", "hidden", "layers", "channels", "blocks",
                                                 "kernel", "substeps", "dt", "h_ode", "rtol", "atol", "max_steps",
                                                 "lr", "weight_decay", "epochs", "batch_size"})
    if cfg.width is not None and (not isinstance(cfg.width, int) or cfg.width < 1):
        raise ConfigError("width must be a positive integer")
    bad_stages = [s for s in cfg.stages if s not in STAGES]
    if bad_stages:
        raise ConfigError(f"unknown stages {bad_stages}")
    try:
        _check_keys("dataset", cfg.dataset, _field_names(CONFIG_TYPES[cfg.benchmark]))
        CONFIG_TYPES[cfg.benchmark](**{**cfg.dataset, "seed": cfg.seed})
        _check_keys("training", cfg.training, set(_field_names(TrainConfig)) - {"seed"})
        cfg.train_config(cfg.seeds[0])
        _check_keys("autoencoder", cfg.autoencoder, _field_names(AEConfig))
        cfg.ae_config()
        _check_keys("evaluation", cfg.evaluation, {"split"})
        _check_keys("diagnostics", cfg.diagnostics, set(_field_names(DiagConfig)) | {"enabled"})
        cfg.diag_config()
        _check_keys("ablation", cfg.ablation, {"enabled", "variants", "width", "depth", "training"})
        _check_keys("ablation.training", cfg.ablation.get("training", {}), set(_field_names(TrainConfig)) - {"seed"})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.evaluation.get("split", "val") not in ("val", "train", "all"):
        raise ConfigError("evaluation.split must be val, train or all")
    variants = cfg.ablation.get("variants", list(ABLATION_VARIANTS))
    if any(v not in ABLATION_VARIANTS for v in variants) or "cord" not in variants:
        raise ConfigError(f"ablation.variants must be drawn from {ABLATION_VARIANTS} and include 'cord'")
    return cfg


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys("config", raw, _field_names(ExperimentConfig))
    if "benchmark" not in raw:
        raise ConfigError("config: 'benchmark' is required")
    raw = copy.deepcopy(raw)
    cfg = ExperimentConfig(**raw)
    for name, default in (("evaluation", {"split": "val"}), ("diagnostics", {"enabled": True}), ("ablation", {"enabled": False})):
        merged = dict(default)
        merged.update(getattr(cfg, name))
        setattr(cfg, name, merged)
    return validate(cfg)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def smoke_config(output_root: str = "runs", seed: int = 0) -> ExperimentConfig:
    """Small double-pendulum run touching every stage; finishes in well under a minute."""
    return from_dict({
        "benchmark": "dp",
        "seed": seed,
        "seeds": [seed],
        "output_root": output_root,
        "dataset": {"n_trajectories": 20},
        "width": 32,
        "training": {"epochs": 50},
        "diagnostics": {"enabled": True, "n_points": 50},
    })


def default_depth(benchmark: str) -> int:
    return REFERENCE_SIZES[benchmark]["mlp"][1]
