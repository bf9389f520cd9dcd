"""Versioned experiment configuration.

A config is a YAML or JSON mapping validated against :class:`ExperimentConfig`;
every key has a default. Dotted ``key=value`` overrides (``optimizer.lr0=auto``)
are applied before validation.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LayerConfig(_Strict):
    kind: Literal["conv", "dense"] = "conv"
    out: int = Field(16, ge=1)
    ksize: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)


def default_architecture() -> list[LayerConfig]:
    return [LayerConfig(out=16), LayerConfig(out=32, stride=2), LayerConfig(out=32)]


class DataConfig(_Strict):
    kind: Literal["gaussian-clusters-images", "correlated-spatial"] = "gaussian-clusters-images"
    n_train: int = Field(512, ge=2)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    classes: int = Field(10, ge=2)
    size: int = Field(8, ge=1)
    channels: int = Field(1, ge=1)
    noise: float = Field(1.0, ge=0)
    label_noise: float = Field(0.1, ge=0, le=1)
    correlation: float = Field(1.0, gt=0)
    seed: int = 0
    augment: bool = False


class OptimizerSection(_Strict):
    kind: Literal["sgd_nesterov", "adam"] = "sgd_nesterov"
    lr0: Union[float, Literal["auto"]] = 0.05
    momentum: float = Field(0.9, ge=0, lt=1)
    gamma_epochs_to_tenth: Optional[float] = Field(None, gt=0)
    project: bool = False
    lr_grid: Optional[list[float]] = None
    lr_search_epochs: int = Field(5, ge=1)

    @field_validator("lr0")
    @classmethod
    def _positive(cls, v):
        if v != "auto" and v <= 0:
            raise ValueError("lr0 must be positive or 'auto'")
        return v


class NoiseSection(_Strict):
    mode: Literal["none", "fixed-gaussian", "exact-chi", "variational"] = "none"
    sigma_v: Optional[list[float]] = None
    sigma_u: Optional[list[float]] = None
    spatial_correlated: bool = True
    granularity: Literal["per_channel", "per_layer"] = "per_channel"
    init_sigma: float = Field(0.05, gt=0)


class ExperimentConfig(_Strict):
    version: int = SCHEMA_VERSION
    architecture: list[LayerConfig] = Field(default_factory=default_architecture)
    leaky_slope: float = 0.01
    normalization: Literal["none", "batch", "weight", "analytic"] = "batch"
    noise: NoiseSection = Field(default_factory=NoiseSection)
    normalization_batch_size: Optional[int] = Field(None, ge=2)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(20, ge=0)
    seed: int = 0
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    data: DataConfig = Field(default_factory=DataConfig)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    kl_factor: float = Field(1.0, ge=0)
    prior_s0: float = 1.0
    prior_sigma0: float = Field(10.0, gt=0)
    mc_eval_samples: int = Field(10, ge=1)
    data_dependent_init: bool = True
    init_batch_size: int = Field(128, ge=2)
    running_momentum: float = Field(0.1, gt=0, le=1)

    @model_validator(mode="after")
    def _check(self):
        if self.version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config version {self.version}, expected {SCHEMA_VERSION}")
        nb = self.normalization_batch_size
        if nb is not None and nb < self.batch_size:
            raise ValueError("normalization_batch_size must be >= batch_size")
        return self

    @property
    def norm_batch(self) -> int:
        return self.normalization_batch_size or self.batch_size


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = _parse_scalar(value)
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
    raw = apply_overrides(raw, overrides or [])
    try:
        return ExperimentConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
