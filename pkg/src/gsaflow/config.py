"""Flat run configuration read from ``key = value`` text files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Union

from .dpo import DpoConfig
from .flow import SamplerConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass(frozen=True)
class RunConfig:
    # model
    hidden_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    latent_grid: int = 8
    latent_channels: int = 4
    patch_size: int = 2
    text_len: int = 8
    vocab_size: int = 64
    lora_rank: int = 16
    lora_alpha: float = 16.0
    ffn_mult: int = 4
    max_references: int = 8
    ref_sample_index: bool = True
    ref_text_context: bool = False
    ref_grad: bool = False
    # sampler
    sampler_steps: int = 50
    cfg_scale: float = 3.5
    cfg_drop_refs: bool = True
    # optimiser, shared by both stages
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    # stage 1
    stage1_lr: float = 1e-4
    stage1_steps: int = 20000
    stage1_batch: int = 4
    caption_dropout: float = 0.1
    group_size: int = 3
    use_gsa: bool = True
    # stage 2
    dpo_beta: float = 1800.0
    dpo_lr: float = 5e-6
    dpo_steps: int = 2000
    losers_per_mode: int = 1
    holdout_per_identity: int = 2
    heldout_pairs: int = 256
    eval_every: int = 100
    # data
    num_identities: int = 8
    frames_per_identity: int = 8
    identity_offset: int = 0
    model_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type == "bool" and not isinstance(value, bool):
                raise ConfigError(f"{f.name} must be a boolean")
            if f.type == "int" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{f.name} must be an integer")
            if f.type == "float" and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"{f.name} must be a number")
        for name in ("stage1_lr", "dpo_lr", "dpo_beta", "stage1_batch", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("stage1_steps", "dpo_steps", "weight_decay", "heldout_pairs", "eval_every",
                     "holdout_per_identity", "losers_per_mode", "identity_offset"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.caption_dropout <= 1.0:
            raise ConfigError("caption_dropout must lie in [0, 1]")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.group_size - 1 > self.max_references:
            raise ConfigError("group_size - 1 exceeds max_references")
        if self.holdout_per_identity >= self.frames_per_identity:
            raise ConfigError("holdout_per_identity must leave training scenarios")
        try:
            self.model_config()
            self.sampler_config()
            self.dpo_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in ModelConfig.field_names() if hasattr(self, k)})

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(steps=self.sampler_steps, cfg_scale=self.cfg_scale, cfg_drop_refs=self.cfg_drop_refs)

    def dpo_config(self) -> DpoConfig:
        return DpoConfig(beta=self.dpo_beta, learning_rate=self.dpo_lr, steps=self.dpo_steps,
                         betas=(self.adam_beta1, self.adam_beta2), eps=self.adam_eps,
                         weight_decay=self.weight_decay)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, kind: str, text: str):
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r} (expected {kind})") from None


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse(key, kinds[key], value)
    return base.replace(**values)


def load_config(path: Union[str, Path, None]) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))
