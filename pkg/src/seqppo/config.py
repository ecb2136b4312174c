"""Experiment configuration: one YAML file per run directory."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .rl import ALGORITHMS, ClipConfig

TASKS = ("counting", "corpus")
PIPELINES = ("mle", "reinforce", "ppo", "ppo_dynamic", "mixer", "seqgan")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "counting"
    algorithm: str = "reinforce"
    # policy optimiser used inside mixer / seqgan runs
    optimizer: str = "reinforce"
    seed: int = 0
    out_dir: str = "runs/default"

    # data
    data_seed: int = 1
    test_seed: int = 2
    train_size: int = 50000
    test_size: int = 2000
    max_n: int = 10
    max_len: int = 20
    # optional dataset files written by ``generate``; generated from the seeds otherwise
    train_file: str | None = None
    test_file: str | None = None

    # model and supervised pretraining
    hidden: int = 128
    model_seed: int = 42
    mle_epochs: int = 12
    mle_lr: float = 1e-3
    mle_batch_size: int = 128
    pretrained: str | None = None

    # policy optimisation
    iterations: int = 200
    lr: float = 1e-4
    batch_size: int = 64
    ppo_epochs: int = 4
    gamma: float = 1.0
    normalize_advantages: bool = False
    baseline_hidden: int = 64
    baseline_lr: float = 1e-3
    clip: ClipConfig | None = None

    # mixer
    mixer_anneal_epochs: int = 10
    mixer_iters_per_epoch: int = 10

    # seqgan
    disc_hidden: int = 64
    disc_lr: float = 1e-3
    d_steps: int = 1
    g_steps: int = 1
    disc_pretrain_steps: int = 50

    # bookkeeping
    eval_samples: int = 10
    eval_every: int = 0
    checkpoint_every: int = 50

    def __post_init__(self):
        if isinstance(self.clip, dict):
            self.clip = ClipConfig(**self.clip)
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.algorithm not in PIPELINES:
            raise ConfigError(f"algorithm must be one of {PIPELINES}, got {self.algorithm!r}")
        if self.optimizer not in ALGORITHMS:
            raise ConfigError(f"optimizer must be one of {ALGORITHMS}, got {self.optimizer!r}")
        positive = ("train_size", "test_size", "hidden", "mle_batch_size", "batch_size",
                    "ppo_epochs", "baseline_hidden", "disc_hidden", "mixer_anneal_epochs",
                    "mixer_iters_per_epoch", "eval_samples", "max_len")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("iterations", "mle_epochs", "d_steps", "g_steps", "disc_pretrain_steps",
                     "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lr", "mle_lr", "baseline_lr", "disc_lr"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be a finite non-negative number")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 1 <= self.max_n <= 10:
            raise ConfigError("max_n must lie in [1, 10]")
        if self.algorithm == "seqgan" and self.g_steps < 1:
            raise ConfigError("seqgan needs g_steps >= 1")

    @property
    def policy_algorithm(self) -> str:
        """The update rule actually applied to the generator."""
        if self.algorithm in ("mixer", "seqgan"):
            return self.optimizer
        return self.algorithm

    def resolved_clip(self) -> ClipConfig:
        """Explicit clip settings, or the tuned defaults for this pipeline."""
        if self.clip is not None:
            return self.clip
        if self.policy_algorithm == "ppo_dynamic":
            return ClipConfig.seqgan_dynamic() if self.algorithm == "seqgan" else ClipConfig.rl_dynamic()
        return ClipConfig()

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.clip is not None:
            d["clip"] = self.clip.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"))
