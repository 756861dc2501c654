"""Run configuration, loaded from YAML and validated with pydantic."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .encoders import BaselineConfig, EncoderConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import LossConfig

COMPARATORS = ("hiptune", "clip-v", "coop-unified", "coop-specific")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Section):
    identities: int = Field(10, ge=2)
    frames: int = Field(3, ge=1)
    size: int = Field(32, ge=4)
    seed: int = Field(0, ge=0)
    leaf_counts: Optional[dict[str, int]] = None


class EncoderSection(_Section):
    patch_size: int = Field(4, ge=1)
    visual_dim: int = Field(64, ge=1)
    text_dim: int = Field(32, ge=1)
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    temperature: float = Field(0.07, gt=0)
    seed: int = Field(0, ge=0)
    pretrain_epochs: int = Field(3, ge=0)
    pretrain_lr: float = Field(1e-3, ge=0)


class ModelSection(_Section):
    prompt_length: int = Field(8, ge=1)
    theta: float = Field(0.7, ge=0, le=1)
    use_attention: bool = True
    prompt_depth: int = Field(1, ge=1)


class TrainSection(_Section):
    lr: float = Field(3e-3, ge=0)
    batch_size: int = Field(32, ge=2)
    stage1_epochs: int = Field(20, ge=0)
    stage2_epochs: int = Field(40, ge=0)
    margin: float = Field(0.3, ge=0)
    triplet_weight: float = Field(1.0, ge=0)
    routing_weight: float = Field(1.0, ge=0)
    joint_finetune: bool = False


class BaselineSection(_Section):
    context_length: int = Field(16, ge=1)
    epochs: int = Field(20, ge=0)


class EvalSection(_Section):
    protocol: Literal["P1", "P2", "P3.1", "P3.2"] = "P1"
    seeds: list[int] = Field(default_factory=lambda: [0])
    comparators: list[str] = Field(default_factory=lambda: list(COMPARATORS))
    threshold: Union[float, Literal["eer", "dev-eer"]] = 0.5

    @field_validator("protocol", mode="before")
    @classmethod
    def _upper(cls, v):
        return str(v).upper()

    @field_validator("comparators")
    @classmethod
    def _known(cls, v):
        bad = [c for c in v if c not in COMPARATORS]
        if bad:
            raise ValueError(f"unknown comparators {bad}; expected a subset of {list(COMPARATORS)}")
        if not v:
            raise ValueError("at least one comparator is required")
        return v

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v):
        if not v or any(s < 0 for s in v):
            raise ValueError("seeds must be a non-empty list of non-negative integers")
        return v


class PathsSection(_Section):
    """Locations used by the file-based CLI commands."""

    data: Optional[str] = None
    split: Optional[str] = None
    checkpoint: Optional[str] = None


class RunConfig(_Section):
    data: DataSection = DataSection()
    encoder: EncoderSection = EncoderSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    baseline: BaselineSection = BaselineSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    def build_encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(
            image_size=self.data.size,
            patch_size=e.patch_size,
            visual_dim=e.visual_dim,
            text_dim=e.text_dim,
            n_layers=e.n_layers,
            n_heads=e.n_heads,
            temperature=e.temperature,
        )

    def build_model_config(self) -> ModelConfig:
        return ModelConfig(**self.model.model_dump())

    def build_loss_config(self) -> LossConfig:
        t = self.train
        return LossConfig(
            margin=t.margin,
            triplet_weight=t.triplet_weight,
            routing_weight=t.routing_weight,
            lr=t.lr,
            batch_size=t.batch_size,
            stage1_epochs=t.stage1_epochs,
            stage2_epochs=t.stage2_epochs,
            joint_finetune=t.joint_finetune,
        )

    def build_baseline_config(self, class_specific: bool) -> BaselineConfig:
        return BaselineConfig(context_length=self.baseline.context_length, class_specific=class_specific)

    def check(self) -> "RunConfig":
        """Cross-section checks that pydantic field rules cannot express."""
        self.build_encoder_config()
        if self.data.size % 4:
            raise ConfigError(f"image size must be a multiple of 4, got {self.data.size}")
        return self


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {}).check()
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {p}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{p} must contain a mapping at the top level")
    return parse_config(data)
