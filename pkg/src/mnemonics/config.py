"""Experiment configuration schema.

Config files are YAML (JSON is accepted as a subset). Unknown keys are
rejected at every level; :meth:`ExperimentConfig.resolved` materializes every
optional default so the snapshot alone reproduces a run.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exemplar import ExemplarHyperparams
from .model import LossWeights


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DataConfig(_Strict):
    kind: Literal["gaussian", "csv", "binary"] = "gaussian"
    # gaussian: class means on a circle of this radius in 2-D
    num_classes: int = Field(6, ge=1)
    radius: float = Field(4.0, gt=0)
    std: float = Field(1.0, gt=0)
    train_per_class: int = Field(500, ge=1)
    test_per_class: int = Field(100, ge=1)
    drift: float = 0.0
    # csv / binary
    path: str | None = None
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _needs_path(self):
        if self.kind != "gaussian" and not self.path:
            raise ValueError(f"data.path is required for kind {self.kind!r}")
        return self


class ScheduleConfig(_Strict):
    total_classes: int = Field(6, ge=1)
    phases: int = Field(2, ge=0, description="number of incremental phases N")
    classes_per_phase: list[int] | None = None

    @model_validator(mode="after")
    def _consistent(self):
        cpp = self.classes_per_phase
        if cpp is not None:
            if len(cpp) != self.phases + 1:
                raise ValueError(f"classes_per_phase needs {self.phases + 1} entries, got {len(cpp)}")
            if sum(cpp) != self.total_classes or min(cpp) < 1:
                raise ValueError("classes_per_phase must be positive and sum to total_classes")
        else:
            from .protocol import build_schedule

            build_schedule(self.total_classes, self.phases)
        return self


class MemoryBudget(_Strict):
    mode: Literal["per_class", "total"] = "per_class"
    per_class: int | None = Field(None, ge=1)
    total_capacity: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _mode_fields(self):
        if self.mode == "per_class" and self.per_class is None:
            raise ValueError("budget.per_class is required in per_class mode")
        if self.mode == "total" and self.total_capacity is None:
            raise ValueError("budget.total_capacity is required in total mode")
        return self

    def quota(self, num_classes: int) -> int:
        if self.mode == "per_class":
            return self.per_class
        return self.total_capacity // max(num_classes, 1)


class ModelConfig(_Strict):
    hidden: int | None = Field(16, ge=1, description="hidden width; null for softmax regression")
    activation: Literal["tanh", "identity"] = "tanh"
    head_init_std: float = Field(0.01, gt=0)


class TrainingConfig(_Strict):
    lr: float = Field(0.5, gt=0, description="model-level learning rate alpha_1")
    epochs: int = Field(300, ge=0)


class ExperimentConfig(_Strict):
    seed: int = Field(0, ge=0)
    data: DataConfig = DataConfig()
    schedule: ScheduleConfig = ScheduleConfig(classes_per_phase=[2, 2, 2])
    budget: MemoryBudget = MemoryBudget(per_class=4)
    strategy: Literal["random", "herding", "mnemonics", "upper_bound"] = "mnemonics"
    adjust_old: bool = True
    use_transfer: bool = False
    use_distillation: bool = True
    loss: LossWeights = LossWeights()
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    exemplar: ExemplarHyperparams = ExemplarHyperparams()
    fine_tune: bool = True
    fine_tune_lr: float | None = Field(None, gt=0)
    fine_tune_epochs: int | None = Field(None, ge=0)

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.data.kind == "gaussian" and self.data.num_classes != self.schedule.total_classes:
            raise ValueError(f"data.num_classes ({self.data.num_classes}) must equal "
                             f"schedule.total_classes ({self.schedule.total_classes})")
        return self

    def resolved(self) -> ExperimentConfig:
        """Copy with every optional default materialized."""
        from .protocol import build_schedule

        update = {}
        if self.schedule.classes_per_phase is None:
            sched = build_schedule(self.schedule.total_classes, self.schedule.phases)
            update["schedule"] = self.schedule.model_copy(
                update={"classes_per_phase": list(sched.classes_per_phase)})
        if self.fine_tune_lr is None:
            update["fine_tune_lr"] = self.exemplar.unroll.inner_lr
        if self.fine_tune_epochs is None:
            update["fine_tune_epochs"] = self.exemplar.unroll.steps
        return self.model_copy(update=update)

    def snapshot(self) -> dict:
        return self.resolved().model_dump(mode="json", by_alias=True)


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises ``pydantic.ValidationError``."""
    text = Path(path).read_text()
    doc = yaml.safe_load(text) if text.strip() else {}
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ExperimentConfig.model_validate(doc)
