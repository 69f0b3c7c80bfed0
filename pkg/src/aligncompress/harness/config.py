"""Strict JSON experiment configuration (unknown keys are rejected)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..compression import CompressionPlan
from ..errors import ConfigurationError, DomainError
from ..losses import CE, CE_PRED, MSE, LossBundle
from ..training import TrainSchedule
from ..weighting import SCHEMES, UNIFORM, WeightingConfig

ALL_SUBSETS = (
    (CE,), (MSE,), (CE_PRED,),
    (CE, MSE), (CE, CE_PRED), (MSE, CE_PRED),
    (CE, MSE, CE_PRED),
)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"  # "blobs" | "seg_blobs"
    num_classes: int = 8
    n_per_class: Any = 50
    n_eval_per_class: Any = None
    dim: int = 2
    spread: float = 0.3
    n_images: int = 64
    n_eval_images: int | None = None
    height: int = 16
    width: int = 16
    noise: float = 0.35
    max_ellipses: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("blobs", "seg_blobs"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")


@dataclass(frozen=True)
class ArchitectureSpec:
    hidden: tuple = (64, 64)  # MLP hidden widths (blobs)
    widths: tuple = (16, 16)  # conv widths (seg_blobs)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "widths", tuple(self.widths))


@dataclass(frozen=True)
class LossGrid:
    subsets: tuple = ((CE,), (CE, MSE))
    temperature: float = 1.0
    symmetric_kd: bool = False

    def __post_init__(self):
        subsets = tuple(tuple(s) for s in self.subsets)
        object.__setattr__(self, "subsets", subsets)
        if not subsets:
            raise ConfigurationError("losses.subsets is empty")
        for s in subsets:
            self.bundle(s)

    def bundle(self, terms) -> LossBundle:
        return LossBundle(tuple(terms), self.temperature, self.symmetric_kd)


@dataclass(frozen=True)
class WeightingGrid:
    schemes: tuple = (UNIFORM,)
    eta: float = 1.0
    eps: float = 1e-8
    update_period: int = 10

    def __post_init__(self):
        object.__setattr__(self, "schemes", tuple(self.schemes))
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigurationError(f"unknown weighting schemes {bad}; choose from {SCHEMES}")

    def config(self, scheme) -> WeightingConfig:
        return WeightingConfig(scheme, self.eta, self.eps, self.update_period)


@dataclass(frozen=True)
class EvaluationSpec:
    iou_sample: int | None = None
    iou_mode: str = "sum"

    def __post_init__(self):
        if self.iou_mode not in ("sum", "mean"):
            raise ConfigurationError(f"unknown iou_mode {self.iou_mode!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    compression: CompressionPlan = field(default_factory=CompressionPlan)
    losses: LossGrid = field(default_factory=LossGrid)
    weighting: WeightingGrid = field(default_factory=WeightingGrid)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    seeds: tuple = (0,)
    output_dir: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigurationError("seeds list is empty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_NESTED = {
    "dataset": DatasetSpec,
    "architecture": ArchitectureSpec,
    "train": TrainSchedule,
    "compression": CompressionPlan,
    "losses": LossGrid,
    "weighting": WeightingGrid,
    "evaluation": EvaluationSpec,
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in _NESTED:
            value = _build(_NESTED[key], value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, DomainError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def dataset_spec_from_dict(data: dict) -> DatasetSpec:
    return _build(DatasetSpec, data, "dataset")
