"""Pipeline configuration, config hashing and seed fan-out.

A config is one JSON or YAML file; command-line flags override its values.
The global seed fans out to every stochastic component as
``SeedSequence([seed, crc32(name)])``, so adding a component never shifts the
seeds of the others.
"""
from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .attacks import AttackConfig
from .defense import DefenseConfig
from .errors import ConfigError
from .evaluation import EXPERIMENTS
from .model import ModelConfig, TrainConfig, vgg_mini

CACHE_ENV = "WCTDEFENSE_CACHE"
DEFAULT_CACHE = ".wctdefense-cache"
DEFAULT_EPS_GRID = (0.0, 0.1, 0.2, 0.3, 0.5, 1.0)

# components that draw from the global seed
SEED_COMPONENTS = ("train", "gallery", "attack", "ablation")


def derive_seed(seed: int, name: str) -> int:
    """Stable per-component seed: first word of ``SeedSequence([seed, crc32(name)])``."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def digest(obj) -> str:
    """16-hex-digit sha256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


@dataclass
class PipelineConfig:
    data_root: str = ""
    dataset: str = "mnist"
    train_size: Optional[int] = None  # None = the whole training split
    eval_size: int = 1000
    model: Optional[dict] = None  # ModelConfig dict; None = VGG-mini
    train: dict = field(default_factory=lambda: asdict(TrainConfig()))
    checkpoint: Optional[str] = None  # pre-trained checkpoint; skips training
    attacks: list = field(default_factory=lambda: [{"kind": "FGSM", "epsilon": 0.3}])
    defense: dict = field(default_factory=lambda: DefenseConfig().to_dict())
    placements: Optional[list] = None  # None = each tap alone, then all taps
    experiments: list = field(default_factory=lambda: list(EXPERIMENTS))
    eps_grid: list = field(default_factory=lambda: list(DEFAULT_EPS_GRID))
    sweep_attack: dict = field(default_factory=lambda: {"kind": "FGSM"})
    ablation_sources: Optional[list] = None
    out: str = "reports"
    cache_dir: Optional[str] = None
    seed: int = 0
    figures: bool = True

    def __post_init__(self):
        self.validate()

    # -------------------------------------------------------------- building

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        # relative paths are relative to the config file
        for key in ("data_root", "checkpoint"):
            if d.get(key) and not Path(d[key]).is_absolute():
                d[key] = str((path.parent / d[key]).resolve())
        return cls.from_dict(d)

    def with_overrides(self, **flags) -> "PipelineConfig":
        """Apply command-line overrides; ``None`` values are ignored."""
        d = asdict(self)
        f = {k: v for k, v in flags.items() if v is not None}
        for key in ("seed", "out", "data_root", "cache_dir", "checkpoint", "dataset", "eval_size", "train_size"):
            if key in f:
                d[key] = f[key]
        if "experiments" in f:
            d["experiments"] = list(f["experiments"])
        if "taps" in f or "ref_layer" in f:
            d["defense"] = {**d["defense"]}
            if "taps" in f:
                d["defense"]["taps"] = list(f["taps"])
            if "ref_layer" in f:
                d["defense"]["ref_layer"] = f["ref_layer"]
        if "attack" in f or "eps" in f:
            base = dict(d["attacks"][0]) if d["attacks"] else {"kind": "FGSM"}
            if "attack" in f:
                base = {"kind": f["attack"], "epsilon": base.get("epsilon", 0.3)}
            if "eps" in f:
                base["epsilon"] = f["eps"]
            d["attacks"] = [base]
        return PipelineConfig.from_dict(d)

    # ------------------------------------------------------------ validation

    def validate(self) -> None:
        if self.eval_size < 1:
            raise ConfigError("eval_size must be >= 1")
        if self.train_size is not None and self.train_size < 1:
            raise ConfigError("train_size must be >= 1")
        unknown = sorted(set(self.experiments) - set(EXPERIMENTS))
        if unknown:
            raise ConfigError(f"unknown experiments {unknown}; expected a subset of {list(EXPERIMENTS)}")
        if not self.attacks and set(self.experiments) - {"epsilon_sweep"}:
            raise ConfigError("at least one attack is needed for the selected experiments")
        grid = [float(e) for e in self.eps_grid]
        if grid != sorted(grid) or len(set(grid)) != len(grid):
            raise ConfigError("eps_grid must be strictly increasing")
        try:
            self.model_config()
            self.train_config()
            self.attack_configs()
            self.sweep_config()
            d = self.defense_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        mc = self.model_config()
        for k in d.taps:
            if k not in mc.taps:
                raise ConfigError(f"defense tap {k} is not a model tap {mc.taps}")
        if d.ref_layer and d.ref_layer not in mc.taps:
            raise ConfigError(f"reference layer {d.ref_layer} is not a model tap {mc.taps}")
        for p in self.placement_list():
            if not set(p) <= set(mc.taps):
                raise ConfigError(f"placement {p} uses taps outside {mc.taps}")

    def check_paths(self) -> None:
        """Referenced paths must exist when a pipeline is started."""
        if self.checkpoint and not Path(self.checkpoint).exists():
            raise ConfigError(f"checkpoint {self.checkpoint} does not exist")
        if not self.data_root:
            raise ConfigError("data_root is not set")
        if not Path(self.data_root).is_dir():
            raise ConfigError(f"data_root {self.data_root} is not a directory")

    # ------------------------------------------------------------ components

    def seeds(self) -> dict:
        return {name: derive_seed(self.seed, name) for name in SEED_COMPONENTS}

    def model_config(self) -> ModelConfig:
        seed = derive_seed(self.seed, "train")
        if self.model is None:
            return vgg_mini(seed)
        return ModelConfig.from_dict({**self.model, "seed": seed})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def attack_configs(self) -> list:
        return [self._attack(a) for a in self.attacks]

    def sweep_config(self) -> AttackConfig:
        return self._attack(self.sweep_attack)

    def _attack(self, d: dict) -> AttackConfig:
        cfg = AttackConfig.from_dict(d)
        return replace(cfg, seed=derive_seed(self.seed, f"attack/{cfg.kind}"))

    def defense_config(self) -> DefenseConfig:
        return DefenseConfig.from_dict(self.defense)

    def placement_list(self) -> list:
        taps = self.model_config().taps
        if self.placements is None:
            return [(k,) for k in taps] + ([tuple(taps)] if len(taps) > 1 else [])
        return [tuple(sorted(p)) for p in self.placements]

    def cache_path(self) -> Path:
        return Path(self.cache_dir or os.environ.get(CACHE_ENV) or DEFAULT_CACHE)

    def echo(self) -> dict:
        """Result-relevant config (output and cache locations excluded)."""
        d = asdict(self)
        for key in ("out", "cache_dir", "figures"):
            d.pop(key)
        return d
