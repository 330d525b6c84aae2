"""Run configuration: JSON file with a schema version, full-scale defaults and presets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from . import network as net
from .rating import EvalSchedule
from .selfplay import SelfPlayConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    iterations: int = 100
    # self-play and search
    parallel_games: int = 1024
    steps_per_iteration: int = 256
    simulations: int = 128
    max_considered: int = 16
    c_visit: float = 50.0
    c_scale: float = 1.0
    # network
    blocks: int = 8
    filters: int = 128
    value_hidden: int = 128
    # optimisation
    batch_size: int = 512
    total_training_steps: int = 102_400
    optimizer_steps_per_iteration: Optional[int] = None  # None: total / iterations
    peak_lr: float = 0.002
    min_lr: float = 1e-5
    warmup_steps: int = 500
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # stabilisation toggles
    augmentation: bool = True
    buffer_iterations: int = 16
    past_self_play: bool = True
    past_opponent_fraction: float = 0.25
    # evaluation
    eval_start: int = 20
    eval_period: int = 5
    eval_opponents: int = 4
    pool_cap: int = 10
    games_per_pairing: int = 8

    @property
    def buffer_capacity(self) -> int:
        return self.buffer_iterations * self.parallel_games * self.steps_per_iteration

    @property
    def steps_per_iteration_opt(self) -> int:
        if self.optimizer_steps_per_iteration is not None:
            return self.optimizer_steps_per_iteration
        return self.total_training_steps // self.iterations

    def net_config(self) -> net.NetConfig:
        return net.NetConfig(self.blocks, self.filters, self.value_hidden)

    def optim_config(self) -> net.OptimConfig:
        return net.OptimConfig(self.peak_lr, self.min_lr, self.warmup_steps, self.total_training_steps,
                               self.weight_decay, self.beta1, self.beta2, self.adam_eps)

    def selfplay_config(self) -> SelfPlayConfig:
        fraction = self.past_opponent_fraction if self.past_self_play else 0.0
        return SelfPlayConfig(self.parallel_games, self.steps_per_iteration, self.simulations, fraction,
                              self.max_considered, self.c_visit, self.c_scale)

    def eval_schedule(self) -> EvalSchedule:
        return EvalSchedule(self.eval_start, self.eval_period, self.eval_opponents, self.pool_cap,
                            self.games_per_pairing)

    def validate(self) -> "RunConfig":
        problems = []
        if self.simulations < 2:
            problems.append("simulations must be at least 2")
        if self.games_per_pairing < 2 or self.games_per_pairing % 2:
            problems.append("games_per_pairing must be a positive even number")
        if self.batch_size > self.buffer_capacity:
            problems.append(f"batch_size {self.batch_size} exceeds buffer capacity {self.buffer_capacity}")
        for name in ("iterations", "parallel_games", "steps_per_iteration", "batch_size", "blocks", "filters",
                     "value_hidden", "buffer_iterations", "total_training_steps", "max_considered"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.optimizer_steps_per_iteration is not None and self.optimizer_steps_per_iteration < 0:
            problems.append("optimizer_steps_per_iteration must be non-negative")
        if not 0.0 <= self.past_opponent_fraction <= 1.0:
            problems.append("past_opponent_fraction must lie in [0, 1]")
        if self.warmup_steps < 0 or self.min_lr < 0 or self.peak_lr <= 0:
            problems.append("invalid learning-rate schedule")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d).validate()


PRESETS = {
    "baseline": {"augmentation": False, "buffer_iterations": 8, "past_self_play": False},
    "aug_buffer": {"augmentation": True, "buffer_iterations": 16, "past_self_play": False},
    "full": {"augmentation": True, "buffer_iterations": 16, "past_self_play": True},
}

# The smallest end-to-end learning run that fits on one CPU core.
DESK_SCALE = {
    "iterations": 10,
    "parallel_games": 64,
    "steps_per_iteration": 64,
    "simulations": 32,
    "blocks": 4,
    "filters": 64,
    "value_hidden": 64,
    "batch_size": 256,
    "optimizer_steps_per_iteration": 64,
    "total_training_steps": 640,
    "warmup_steps": 32,
}


def apply_preset(cfg: RunConfig, preset: Optional[str]) -> RunConfig:
    if preset is None:
        return cfg
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    return replace(cfg, **PRESETS[preset]).validate()


def load_config(path=None, preset: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = RunConfig.from_dict(data)
    cfg = apply_preset(cfg, preset)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
