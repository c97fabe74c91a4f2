"""Run configuration: every knob in one serializable tree.

A run is fully determined by (RunConfig, dataset bytes). Configs round-trip
losslessly through JSON and support dotted-key overrides from the CLI
(e.g. ``ddpm.K=50``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Unknown key, bad type, or inconsistent configuration."""


@dataclass
class EnvConfig:
    n_tasks: int = 3
    episode_len: int = 120
    dt: float = 0.05
    a_max: float = 2.0
    image_size: int = 64


@dataclass
class ModelConfig:
    hidden: int = 64          # token width H
    n_tokens_p: int = 4       # proprio token count
    n_tokens_s: int = 4       # semantic token count
    tau: int = 6              # action horizon / foresight lag
    n_heads: int = 4
    d_proprio: int = 6
    d_visual: int = 32        # frozen backbone embedding width
    d_lang: int = 16          # task embedding width
    backbone_seed: int = 7
    frozen_task_table: bool = False
    attention_direction: str = "p_queries_s"  # p_queries_s | s_queries_p | symmetric_self
    pool: str = "learned_query"               # learned_query | mean | max


@dataclass
class MaskConfig:
    ratio: float = 0.3
    # optional step-indexed schedule [[step, ratio], ...]; overrides `ratio`
    curriculum: list = field(default_factory=list)


@dataclass
class LossConfig:
    lambda_recon: float = 0.1
    normalize_predictions: bool = False


@dataclass
class EmaConfig:
    momentum: float = 0.995


@dataclass
class DdpmConfig:
    K: int = 100
    # the classic (1e-4, 0.02) endpoints assume 1000 steps; scaled here by
    # 1000/K so the terminal marginal is near-pure noise (alpha_bar_K << 1)
    beta_start: float = 1e-3
    beta_end: float = 0.2


@dataclass
class PolicyConfig:
    hidden_width: int = 256   # denoiser block width (4H at desk scale)
    obs_width: int = 128      # observation encoder output width H_pol (2H)
    chunk_execute: int = 6    # actions executed per planning call, in [1, tau]
    no_foresight: bool = False
    condition_mode: str = "full"  # full | proprio_only | semantic_only


@dataclass
class TrainConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 25000
    batch_size: int = 64
    lr: float = 3e-4
    stage2_lr: float = 1e-3
    lr_schedule: str = "cosine"  # cosine | constant, stage 2 only
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 0  # 0 = final only
    deterministic: bool = True


@dataclass
class EvalConfig:
    n_rollouts: int = 50
    sample_K: int = 0  # 0 = use ddpm.K at rollout time


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    dataset: str = ""
    out_dir: str = ""
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    ddpm: DdpmConfig = field(default_factory=DdpmConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, path="")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides, returning a new config."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key: {key}")
                node = node[p]
            leaf = parts[-1]
            if not isinstance(node, dict) or leaf not in node:
                raise ConfigError(f"unknown config key: {key}")
            node[leaf] = _coerce(value, node[leaf], key)
        return RunConfig.from_dict(d)

    def validate(self) -> None:
        if not 0.0 <= self.mask.ratio <= 1.0:
            raise ConfigError("mask.ratio must lie in [0, 1]")
        if self.model.hidden % self.model.n_heads != 0:
            raise ConfigError("model.hidden must be divisible by model.n_heads")
        if not 0 < self.ddpm.beta_start <= self.ddpm.beta_end < 1:
            raise ConfigError("require 0 < beta_start <= beta_end < 1")
        if not 1 <= self.policy.chunk_execute <= self.model.tau:
            raise ConfigError("policy.chunk_execute must lie in [1, tau]")
        if self.model.attention_direction not in ("p_queries_s", "s_queries_p", "symmetric_self"):
            raise ConfigError(f"bad attention_direction: {self.model.attention_direction}")
        if self.model.pool not in ("learned_query", "mean", "max"):
            raise ConfigError(f"bad pool: {self.model.pool}")
        if self.policy.condition_mode not in ("full", "proprio_only", "semantic_only"):
            raise ConfigError(f"bad condition_mode: {self.policy.condition_mode}")
        if self.train.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"bad lr_schedule: {self.train.lr_schedule}")


def _build(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"expected mapping at '{path or '<root>'}'")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)} at '{path or '<root>'}'")
    kwargs = {}
    for name, f in fields.items():
        if name not in d:
            continue
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type.endswith("Config")):
            sub_cls = _SUBCONFIGS[name]
            kwargs[name] = _build(sub_cls, d[name], f"{path}{name}.")
        else:
            kwargs[name] = d[name]
    return cls(**kwargs)


_SUBCONFIGS = {
    "env": EnvConfig,
    "model": ModelConfig,
    "mask": MaskConfig,
    "loss": LossConfig,
    "ema": EmaConfig,
    "ddpm": DdpmConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _coerce(value: Any, current: Any, key: str) -> Any:
    """Coerce a CLI string override to the type of the existing value."""
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        low = value.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse bool for {key}: {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(value)
        except ValueError as e:
            raise ConfigError(f"cannot parse int for {key}: {value!r}") from e
    if isinstance(current, float):
        try:
            return float(value)
        except ValueError as e:
            raise ConfigError(f"cannot parse float for {key}: {value!r}") from e
    if isinstance(current, list):
        return json.loads(value)
    return value


def desk_preset() -> RunConfig:
    """Small dims and short budgets; the tested configuration."""
    return RunConfig()


def paper_preset() -> RunConfig:
    """Full-scale hyperparameters preserved as intent; not CI-exercised."""
    cfg = RunConfig()
    cfg.model.hidden = 1024
    cfg.train.stage1_steps = 25_000
    cfg.train.stage2_steps = 200_000
    cfg.train.batch_size = 128
    cfg.policy.hidden_width = 4096
    cfg.policy.obs_width = 2048
    return cfg


def tiny_preset() -> RunConfig:
    """Dims small enough for double-precision finite-difference checks."""
    cfg = RunConfig()
    cfg.model.hidden = 8
    cfg.model.n_tokens_p = 2
    cfg.model.n_tokens_s = 2
    cfg.model.tau = 2
    cfg.model.n_heads = 2
    cfg.model.d_visual = 4
    cfg.model.d_lang = 4
    cfg.policy.hidden_width = 16
    cfg.policy.obs_width = 16
    cfg.policy.chunk_execute = 2
    cfg.ddpm.K = 10
    return cfg


PRESETS = {"desk": desk_preset, "paper": paper_preset, "tiny": tiny_preset}
