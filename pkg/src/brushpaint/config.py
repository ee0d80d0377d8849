"""Run configuration.

Defaults follow the published hyper-parameters where they exist (loss
weights 1/100/0.1, learning rates 1e-5 for the brush branch and 1e-7 for the
style extractor, confidence 0.6, aesthetic 5.8); everything else is sized
for a single CPU.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError

SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusConfig(_Section):
    seed: int = 1234
    size: int = 500
    eval_seed: int = 98765
    eval_size: int = 50
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3


class ScheduleConfig(_Section):
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05


class ModelConfig(_Section):
    widths: list[int] = Field(default_factory=lambda: [16, 32, 64])
    heads: int = 2
    max_kv_tokens: int = 256
    text_dim: int = 32
    temb_dim: int = 64
    sin_dim: int = 32
    seq_len: int = 8
    injection_weight: float = 1.0
    style_widths: list[int] = Field(default_factory=lambda: [8, 16, 32, 32, 32])
    edge_head_std: float = 0.02


class LossConfig(_Section):
    gamma: float = 1.0
    delta: float = 100.0
    eta: float = 0.1
    reduction: Literal["frobenius", "mean"] = "frobenius"

    @model_validator(mode="after")
    def _non_negative(self):
        if min(self.gamma, self.delta, self.eta) < 0:
            raise ValueError("loss weights must be non-negative")
        return self


class OptimConfig(_Section):
    lr_branch: float = 1e-5
    lr_style: float = 1e-7
    lr_pretrain: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_steps: int = 2000
    train_steps: int = 3000
    batch_size: int = 8
    object_fraction: float = 0.5
    log_every: int = 50
    checkpoint_every: int = 1000
    audit_every: int = 100


class AnnotateConfig(_Section):
    min_confidence: float = 0.6
    min_aesthetic: float = 5.8
    min_resolution: int = 64
    perturb: bool = True


class IOConfig(_Section):
    workdir: str = "runs/default"


class RunConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    losses: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    annotate: AnnotateConfig = Field(default_factory=AnnotateConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """Apply dotted-path overrides such as ``{"losses.eta": 0.0}``."""
        data = self.model_dump()
        for path, value in overrides.items():
            node = data
            keys = path.split(".")
            for key in keys[:-1]:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"unknown config section in {path!r}")
                node = node[key]
            if keys[-1] not in node:
                raise ConfigError(f"unknown config key {path!r}")
            node[keys[-1]] = value
        try:
            return RunConfig.model_validate(data)
        except Exception as exc:  # pydantic.ValidationError
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {data.get('schema_version')} unsupported")
    try:
        return RunConfig.model_validate(data)
    except Exception as exc:
        raise ConfigError(str(exc)) from exc


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value`` with value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
