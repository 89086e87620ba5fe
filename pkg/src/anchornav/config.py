"""Run configuration: one serializable object covering every stage.

A run is described by the model shape, reward shaping, PPO settings,
pretraining settings, and evaluation suite layout.  The whole object
round-trips through JSON; its sha256 digest stamps every artifact so
checkpoints, demo files, and reports are self-describing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .model import ModelConfig
from .sim import ObsConfig, RewardConfig
from .training import PpoConfig


@dataclass
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-4
    cosine_period: int = 20

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class SuiteConfig:
    tasks: tuple = ("empty", "obstacle", "pedestrian", "both")
    n_scenes: int = 50
    episodes_per_scene: int = 1

    def __post_init__(self):
        self.tasks = tuple(self.tasks)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    window: float = 8.0
    seed: int = 0

    def obs_cfg(self) -> ObsConfig:
        return ObsConfig(
            k=self.model.context_k, size=self.model.raster_size, window=self.window
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["suite"]["tasks"] = list(self.suite.tasks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        def build(klass, payload):
            names = {f.name for f in dataclasses.fields(klass)}
            unknown = set(payload) - names
            if unknown:
                raise ValueError(f"unknown {klass.__name__} fields: {sorted(unknown)}")
            return klass(**payload)

        cfg = cls()
        for key, klass in (
            ("model", ModelConfig),
            ("reward", RewardConfig),
            ("ppo", PpoConfig),
            ("pretrain", PretrainConfig),
            ("suite", SuiteConfig),
        ):
            if key in d:
                setattr(cfg, key, build(klass, d[key]))
        for key in ("window", "seed"):
            if key in d:
                setattr(cfg, key, type(getattr(cfg, key))(d[key]))
        unknown = set(d) - {"model", "reward", "ppo", "pretrain", "suite", "window", "seed"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cfg

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> RunConfig:
    with open(path) as f:
        return RunConfig.from_dict(json.load(f))


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply dotted-path overrides like {"ppo.gamma": 0.98}; flags win."""
    d = cfg.to_dict()
    for path, value in overrides.items():
        if value is None:
            continue
        parts = path.split(".")
        node = d
        for p in parts[:-1]:
            if p not in node:
                raise ValueError(f"unknown config path: {path}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config path: {path}")
        node[parts[-1]] = value
    return RunConfig.from_dict(d)
