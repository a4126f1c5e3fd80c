"""Run configuration: one JSON document with [model], [phase1], [phase2],
[env], and [retrieval] sections. Every decided default lives here under its
own name and is embedded into every artifact the pipeline produces.

The seed can be overridden with the BVLA_SEED environment variable.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 256          # hidden width D
    n_blocks: int = 8           # three-stream encoder depth L
    d_state: int = 16           # SSM state width
    d_conv: int = 4             # depthwise causal conv width
    expand: int = 2             # SSM channel expansion factor
    horizon: int = 16           # action chunk length H
    head_hidden: int = 256      # projection-head hidden width
    head_out: int = 128         # progress-head output width
    flow_blocks: int = 2        # flow trunk depth
    dtype: str = "f32"          # training precision; tests always run f64


@dataclass
class Phase1Config:
    epochs: int = 40
    batch_size: int = 16
    lr_backbone: float = 1e-4
    lr_obs_encoder: float = 1e-5
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    ema_decay: float = 0.99
    alpha: float = 1.0          # prototype-clustering weight
    beta: float = 1.0           # progress-InfoNCE weight
    gamma: float = 0.1          # clustering temperature
    tau: float = 0.1            # progress temperature
    frame_skip: int = 4
    local_variant: str = "ema"  # or "literal" (the printed same-vector form)


@dataclass
class Phase2Config:
    steps: int = 5000
    batch_size: int = 64
    lr: float = 5e-5
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    lambda_prior: float = 0.1
    p_drop: float = 0.5           # Bernoulli prior-dropout rate
    lambda_guidance: float = 1.0  # inference guidance strength
    flow_steps: int = 10
    exec_horizon: Optional[int] = None  # actions consumed per plan (None = H)


@dataclass
class EnvConfig:
    n_per_task: int = 50
    tasks: Optional[list[int]] = None   # None = all eight
    eval_episodes: int = 50
    eval_tasks: Optional[list[int]] = None


@dataclass
class RetrievalConfig:
    kappa: float = 0.1
    k: int = 5


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    env: EnvConfig = field(default_factory=EnvConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    seed: int = 0

    def np_dtype(self):
        if self.model.dtype == "f32":
            return np.float32
        if self.model.dtype == "f64":
            return np.float64
        raise ConfigError(f"unknown dtype {self.model.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        sections = {f.name: f for f in fields(cls)}
        for key, value in doc.items():
            if key not in sections:
                raise ConfigError(f"unknown config section {key!r}")
            if key == "seed":
                cfg.seed = int(value)
                continue
            section = getattr(cfg, key)
            known = {f.name for f in fields(section)}
            for k, v in value.items():
                if k not in known:
                    raise ConfigError(f"unknown config key {key}.{k}")
                setattr(section, k, v)
        return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config does not parse: {e}") from e
        cfg = RunConfig.from_dict(doc)
    env_seed = os.environ.get("BVLA_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
