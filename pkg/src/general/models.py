"""
Data Models for the Chorus Pipeline
===================================
Contains all data structures and Pydantic models used across the pipeline:
domain records as dataclasses, tunables and configs as Pydantic models.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from general.errors import ContractViolation


# Core Data Structures
@dataclass
class SensorSegment:
    """One multichannel window of shape (C, T) with its context and optional label."""
    values: np.ndarray
    context_id: str
    label: Optional[int] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ContractViolation(f"segment must be (C, T), got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ContractViolation(f"segment for {self.context_id} contains non-finite values")


@dataclass
class ContextRecord:
    """Context identifier, free-text description and its hashed text features."""
    context_id: str
    description: str
    features: np.ndarray

    @property
    def normalized(self) -> bool:
        return bool(np.any(self.features != 0))


@dataclass
class LatentPair:
    """Sensor embedding and context posterior for a batch (rows are samples)."""
    z_x: torch.Tensor
    mu_c: torch.Tensor
    logvar_c: torch.Tensor
    z_c: torch.Tensor


@dataclass
class GateDecision:
    """Output of the gated head for a batch."""
    alpha: torch.Tensor        # (B, 2): [alpha_sensor, alpha_context]
    h_sensor: torch.Tensor     # (B, h)
    h_context: torch.Tensor    # (B, h)
    h_final: torch.Tensor      # (B, h) or (B, 2h) for concatenation
    logits: torch.Tensor       # (B, K)
    y_hat: torch.Tensor        # (B,)


@dataclass
class SensorDataset:
    """Columnar dataset: segments (N, C, T), labels (N,), context ids (N,)."""
    segments: np.ndarray
    labels: np.ndarray
    context_ids: List[str]
    descriptions: Dict[str, str]
    spec: Optional["SyntheticSpec"] = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def contexts(self) -> List[str]:
        return sorted(set(self.context_ids))

    def subset(self, indices) -> "SensorDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return SensorDataset(
            segments=self.segments[indices],
            labels=self.labels[indices],
            context_ids=[self.context_ids[i] for i in indices],
            descriptions=dict(self.descriptions),
            spec=self.spec,
        )

    def indices_for(self, contexts) -> np.ndarray:
        wanted = set(contexts)
        return np.array([i for i, c in enumerate(self.context_ids) if c in wanted], dtype=np.int64)

    def select_contexts(self, contexts) -> "SensorDataset":
        return self.subset(self.indices_for(contexts))


@dataclass
class ShiftReport:
    """MMD table, tiers and the severity index driving regime selection."""
    mmd: Dict[str, float]
    tiers: Dict[str, str]
    sigma: float
    kind: str
    features: str
    ties: List[str] = field(default_factory=list)
    perf_low: Optional[float] = None
    perf_high: Optional[float] = None
    cm: Optional[float] = None
    regime: Optional[str] = None

    def rows(self) -> List[Dict[str, Any]]:
        ordered = sorted(self.mmd, key=lambda c: (self.mmd[c], c))
        return [{"context": c, "mmd": self.mmd[c], "tier": self.tiers.get(c, "")} for c in ordered]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mmd": self.mmd, "tiers": self.tiers, "sigma": self.sigma, "kind": self.kind,
            "features": self.features, "ties": self.ties, "perf_low": self.perf_low,
            "perf_high": self.perf_high, "cm": self.cm, "regime": self.regime,
        }


@dataclass
class TrainingReport:
    """Per-epoch loss history of one training stage."""
    history: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_value: float = float("inf")
    stop_reason: str = "not_started"
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "history": self.history, "best_epoch": self.best_epoch,
            "best_value": self.best_value, "stop_reason": self.stop_reason, **self.extra,
        }


@dataclass
class StreamEvent:
    """One timestamped sample of a streaming trace."""
    index: int
    segment: np.ndarray
    context_id: str
    description: Optional[str]
    true_label: Optional[int] = None


# Pydantic Models for configuration
class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ContextSpec(StrictModel):
    name: str
    description: str
    shift: float = Field(0.0, ge=0.0, le=1.0)
    gain: float = 1.0
    noise: float = Field(0.0, ge=0.0)


def default_contexts() -> List[ContextSpec]:
    return [
        ContextSpec(name="left_pocket", description="Left pocket", shift=0.10, gain=1.0, noise=0.1),
        ContextSpec(name="right_pocket", description="Right pocket", shift=0.15, gain=1.0, noise=0.1),
        ContextSpec(name="upper_arm", description="Upper arm", shift=0.20, gain=1.0, noise=0.1),
        ContextSpec(name="wrist", description="Wrist", shift=0.50, gain=1.0, noise=0.1),
        ContextSpec(name="belt", description="Belt", shift=0.90, gain=1.0, noise=0.1),
    ]


class SyntheticSpec(StrictModel):
    num_classes: int = 6
    channels: int = 3
    length: int = 128
    contexts: List[ContextSpec] = Field(default_factory=default_contexts)
    samples_per_cell: int = 400
    phase_jitter: float = Field(0.3, ge=0.0)
    amplitude_jitter: float = Field(0.1, ge=0.0)
    seed: int = 0


class ModelDims(StrictModel):
    channels: int = 3
    length: int = 128
    latent: int = 32
    text_dim: int = 64
    hidden: int = 32
    num_classes: int = 6
    conv_channels: Tuple[int, int] = (16, 32)
    kernel: int = 5
    stride: int = 2
    decoder_hidden: int = 128
    context_hidden: int = 64
    controller_hidden: int = 16

    @property
    def gate_features(self) -> int:
        return 2 + 2 * self.channels + 1


class OptimizerConfig(StrictModel):
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = Field(32, gt=0)
    max_epochs: int = Field(100, ge=0)
    patience: int = Field(10, gt=0)
    # Minimum optimizer steps per epoch; small training sets are reshuffled and revisited.
    steps_per_epoch: int = Field(0, ge=0)

    @field_validator("lr")
    @classmethod
    def _positive_lr(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value


class RegimeConfig(StrictModel):
    name: Literal["weak", "medium", "strong"]
    lam: float
    gamma: float
    lambda_xc: float = 1.0
    lambda_cx: float = 1.0

    @model_validator(mode="after")
    def _check_regime(self) -> "RegimeConfig":
        if self.lambda_xc <= 0 or self.lambda_cx <= 0:
            raise ValueError("reconstruction weights must be positive")
        if self.name == "weak" and self.lam != 0:
            raise ValueError("weak regime requires lam == 0")
        if self.name == "medium" and not (self.lam > 0 and self.gamma == 0):
            raise ValueError("medium regime requires lam > 0 and gamma == 0")
        if self.name == "strong" and not (self.lam > 0 and self.gamma > 0):
            raise ValueError("strong regime requires lam > 0 and gamma > 0")
        return self


class PretrainConfig(StrictModel):
    regime: Literal["weak", "medium", "strong", "auto"] = "auto"
    lam: float = 1e-2
    gamma: float = 0.5
    lambda_xc: float = 1.0
    lambda_cx: float = 1.0
    tau: float = Field(0.1, gt=0)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)


class CustomizeConfig(StrictModel):
    method: Literal["chorus", "sensor_only", "fix_add", "fix_concat",
                    "align_only", "dyn_only", "c1", "c1c2"] = "chorus"
    budget: float = 0.01
    lambda_balance: float = Field(0.01, ge=0)
    dropout: float = Field(0.3, ge=0, lt=1)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(steps_per_epoch=25))

    @field_validator("budget")
    @classmethod
    def _budget_range(cls, value: float) -> float:
        if not (0.0 < value <= 1.0):
            raise ValueError("label budget must lie in (0, 1]")
        return value


class ShiftConfig(StrictModel):
    features: Literal["summary", "raw"] = "summary"
    kind: Literal["biased", "unbiased"] = "biased"
    weak_threshold: float = 0.25
    strong_threshold: float = 0.45
    max_points: int = Field(2000, ge=2)
    source_contexts: List[str] = Field(default_factory=lambda: ["left_pocket", "right_pocket"])
    target_contexts: List[str] = Field(default_factory=lambda: ["upper_arm", "wrist", "belt"])

    @model_validator(mode="after")
    def _ordered_thresholds(self) -> "ShiftConfig":
        if self.weak_threshold > self.strong_threshold:
            raise ValueError("weak_threshold must not exceed strong_threshold")
        return self


class StreamConfig(StrictModel):
    capacity: int = 16
    trace_length: int = Field(3000, gt=0)
    switch_points: List[int] = Field(default_factory=lambda: [1000, 2000])
    contexts: List[str] = Field(default_factory=lambda: ["left_pocket", "belt", "wrist"])
    no_cache: bool = False
    compare_uncached: bool = True

    @field_validator("capacity")
    @classmethod
    def _positive_capacity(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("cache capacity must be positive")
        return value


class ExperimentConfig(StrictModel):
    methods: List[Literal["chorus", "sensor_only", "fix_add", "fix_concat",
                          "align_only", "dyn_only", "c1", "c1c2"]] = Field(
        default_factory=lambda: ["chorus", "sensor_only", "fix_add", "fix_concat",
                                 "align_only", "dyn_only", "c1", "c1c2"])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    budget: float = 0.01
    pretrain_fraction: float = Field(0.8, gt=0, lt=1)
    workers: int = Field(1, gt=0)
    budgets: List[float] = Field(default_factory=lambda: [0.01, 0.02, 0.05, 0.1])

    @field_validator("budget")
    @classmethod
    def _budget_range(cls, value: float) -> float:
        if not (0.0 < value <= 1.0):
            raise ValueError("label budget must lie in (0, 1]")
        return value


class PathsConfig(StrictModel):
    out_dir: str = "runs"
    dataset: str = "dataset.jsonl"
    checkpoint: str = "model.chor"
    head_checkpoint: str = "model_head.chor"
    trace: str = "trace.jsonl"


class RunConfig(StrictModel):
    seed: int = 0
    data: SyntheticSpec = Field(default_factory=SyntheticSpec)
    model: ModelDims = Field(default_factory=ModelDims)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    customize: CustomizeConfig = Field(default_factory=CustomizeConfig)
    shift: ShiftConfig = Field(default_factory=ShiftConfig)
    stream: StreamConfig = Field(default_factory=StreamConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def _dims_match_data(self) -> "RunConfig":
        if (self.model.channels, self.model.length, self.model.num_classes) != (
                self.data.channels, self.data.length, self.data.num_classes):
            raise ValueError("model.channels/length/num_classes must match data")
        return self
