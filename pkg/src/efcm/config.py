"""Run configuration: YAML files validated before any work starts.

Every section rejects unknown keys. ``override`` applies dotted
``key.path=value`` pairs (values parsed as YAML scalars) before validation.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .distill import DistillConfig
from .mil import StrategyConfig
from .models import ModelSpec
from .profiler import FPSProtocol

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSection(_Strict):
    variant: Literal["fpd", "vfd", "teacher-frozen-random"] = "fpd"
    input_size: int = 224
    dim: int = 384
    depth: int = 3
    heads: Optional[int] = None
    mlp_ratio: int = 4
    groups: int = 32
    reduced_dim: int = 32
    teacher_dim: int = 1024
    extractor_frozen: Optional[bool] = None
    teacher_widths: tuple[int, ...] = (32, 64, 128)

    def spec(self) -> ModelSpec:
        return ModelSpec.from_dict(self.model_dump())


class DatasetSection(_Strict):
    kind: Literal["patch-level", "slide-level"] = "patch-level"
    root: Optional[str] = None  # existing dataset; synth-data writes here if unset -> run dir
    params: dict = Field(default_factory=dict)  # generator config (PatchDataConfig / SlideDataConfig fields)


class DistillSection(_Strict):
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_size: int = 64
    tau: float = 1.0
    teacher_seed: int = 1234
    checkpoint_every: int = 500
    smooth_window: int = 50
    augment: bool = False

    def config(self, seed: int) -> DistillConfig:
        return DistillConfig(**self.model_dump(), seed=seed)


class StrategySection(_Strict):
    strategy: Literal["reuse", "retrain", "etc"] = "etc"
    strategies: Optional[list[Literal["reuse", "retrain", "etc"]]] = None  # mil-run: which to compare
    k: int = 512
    student_lr: float = 1e-5
    head_lr: float = 5e-3
    batch_size: int = 16
    label_smoothing: float = 0.1
    epochs: int = 20
    etc_epochs: int = 5
    scorer_epochs: int = 20
    hidden: int = 64
    num_classes: int = 2
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    heatmaps: bool = True

    def config(self, seed: int, strategy: str | None = None) -> StrategyConfig:
        d = self.model_dump(exclude={"strategies", "heatmaps"})
        if strategy is not None:
            d["strategy"] = strategy
        return StrategyConfig(**d, seed=seed)


class ProfileSection(_Strict):
    models: dict[str, ModelSection] = Field(
        default_factory=lambda: {"fpd": ModelSection(variant="fpd"), "vfd": ModelSection(variant="vfd")}
    )
    batch: int = 1
    warmup: int = 10
    timed: int = 100
    measure: bool = True
    memory: bool = False

    def protocol(self) -> FPSProtocol:
        return FPSProtocol(self.batch, self.warmup, self.timed)


class RunConfig(_Strict):
    version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs"
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    patch_dataset: Optional[DatasetSection] = None  # mil-run: distillation data
    model: ModelSection = Field(default_factory=ModelSection)
    distill: DistillSection = Field(default_factory=DistillSection)
    strategy: StrategySection = Field(default_factory=StrategySection)
    profile: ProfileSection = Field(default_factory=ProfileSection)
    student_checkpoint: Optional[str] = None  # finetune input
    runs: list[str] = Field(default_factory=list)  # report inputs

    @model_validator(mode="after")
    def _check(self):
        if self.version != SCHEMA_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        self.model.spec()  # divisibility and variant checks
        self.distill.config(self.seed)
        self.strategy.config(self.seed)
        return self


def parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = dict(raw or {})
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key.path=value")
        path, value = item.split("=", 1)
        node = raw
        keys = path.strip().split(".")
        for k in keys[:-1]:
            nxt = node.get(k)
            if not isinstance(nxt, dict):
                nxt = {}
            node[k] = dict(nxt)
            node = node[k]
        node[keys[-1]] = parse_value(value)
    return raw


def load_config(path, overrides: list[str] | None = None, seed: int | None = None, out: str | None = None) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text()) if path is not None else {}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    raw = apply_overrides(raw, overrides or [])
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return RunConfig.model_validate(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True)
