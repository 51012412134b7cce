"""Experiment configuration: nested, strictly validated, YAML or JSON on disk."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from cocon.data import VIEWS
from cocon.losses import LossWeights


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DataConfig(_Strict):
    classes: int = Field(8, ge=1, le=8)
    clips: int = Field(800, ge=1)
    frame_size: int = Field(64, ge=16)
    N: int = Field(4, ge=2, description="blocks per self-supervised sample")
    K: int = Field(3, ge=1, description="frames per block")
    stride: int = Field(2, ge=1)
    views: list[str] = ["rgb", "flow"]
    split_seed: int = 0
    splits: tuple[float, float, float] = (0.7, 0.1, 0.2)
    clip_blocks: int | None = Field(
        None, description="blocks rendered per clip; defaults to N + N // 2"
    )
    tint_spread: float = Field(0.0, ge=0, le=0.5, description="per-clip rgb background tint range")
    background_texture: float = Field(0.0, ge=0, description="rgb background texture amplitude")

    def scene_kwargs(self) -> dict:
        return {"tint_spread": self.tint_spread, "background_texture": self.background_texture}

    @model_validator(mode="after")
    def _check(self):
        unknown = set(self.views) - set(VIEWS)
        if unknown:
            raise ValueError(f"unknown views {sorted(unknown)}")
        if len(set(self.views)) != len(self.views):
            raise ValueError("duplicate views")
        if self.total_blocks < self.N:
            raise ValueError("clip_blocks must be >= N")
        return self

    @property
    def total_blocks(self) -> int:
        return self.clip_blocks if self.clip_blocks is not None else self.N + self.N // 2


class ModelConfig(_Strict):
    D: int = Field(32, ge=1)
    depth: int = Field(3, ge=1)
    width: int = Field(16, ge=1)
    hidden: int | None = None
    dropout: float = Field(0.1, ge=0, lt=1)
    pred_steps: int = Field(2, ge=1)


class LossConfig(_Strict):
    tau: float = Field(0.005, gt=0)
    alpha: float = Field(1.0, ge=0)
    lambda_: float = Field(10.0, ge=0, alias="lambda")
    mu_mode: Literal["auto_balance", "fixed"] = "auto_balance"
    mu_value: float = Field(1.0, ge=0)
    metric: Literal["cosine01", "dot"] = "cosine01"
    unit: Literal["clip", "block"] = "clip"

    def weights(self) -> LossWeights:
        return LossWeights(
            alpha=self.alpha,
            lambda_=self.lambda_,
            mu_mode=self.mu_mode,
            mu_value=self.mu_value,
            tau=self.tau,
            metric=self.metric,
        )


class TrainConfig(_Strict):
    phase1_epochs: int = Field(30, ge=0)
    phase2_epochs: int = Field(20, ge=0)
    batch: int = Field(16, ge=2)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-5, ge=0)
    patience: int = Field(3, ge=1)
    decay_factor: float = Field(0.1, gt=0, le=1)
    max_decays: int = Field(2, ge=0)
    seed: int = 0
    ablation: Literal["cpc", "sim_cpc", "sync_cpc", "cocon"] = "cocon"
    augment: bool = True


class EvalConfig(_Strict):
    mode: Literal["linear_probe", "finetune"] = "linear_probe"
    epochs: int = Field(20, ge=1)
    lr: float = Field(1e-3, gt=0)
    decay_epoch: int = 15
    dropout: float = Field(0.7, ge=0, lt=1)
    batch: int = Field(16, ge=1)
    window: int | None = Field(None, description="blocks per inference window; defaults to N")


class ExperimentConfig(_Strict):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.model.pred_steps >= self.data.N:
            raise ValueError("model.pred_steps must be smaller than data.N")
        if self.train.ablation != "cpc" and len(self.data.views) < 2 and self.train.phase2_epochs > 0:
            raise ValueError("joint cooperative training needs at least two views")
        return self

    @property
    def window(self) -> int:
        return self.eval.window or self.data.N

    def dump(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return ExperimentConfig.model_validate(raw or {})


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        path.write_text(json.dumps(config.dump(), indent=2))
    else:
        path.write_text(yaml.safe_dump(config.dump(), sort_keys=False))
    return path


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    raw = config.dump()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ValueError(f"override {item!r} must look like section.key=value")
        section, name = key.split(".", 1)
        if section not in raw:
            raise ValueError(f"unknown config section {section!r}")
        raw[section][name] = yaml.safe_load(value)
    return ExperimentConfig.model_validate(raw)


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema(by_alias=True)
