"""Training, ensemble and federated configuration and results"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field

from robust_bci.errors import ValidationError
from robust_bci.models.attack import AttackConfig
from robust_bci.models.network import ModelConfig, ModelParams

Objective = Literal["ce", "adv", "adv_plus_source", "ce_plus_source"]
SOURCE_OBJECTIVES = ("adv_plus_source", "ce_plus_source")


class TrainConfig(BaseModel):
    """Mini-batch training loop settings"""
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, ge=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    objective: Objective = "ce"
    augmentation: Literal["none", "scale"] = "none"
    beta: float = Field(0.05, ge=0.0, lt=1.0, description="Scale augmentation strength")
    attack: AttackConfig = Field(default_factory=lambda: AttackConfig(epsilon=0.03))
    seed: int = 0

    @property
    def uses_source(self) -> bool:
        return self.objective in SOURCE_OBJECTIVES

    @property
    def adversarial(self) -> bool:
        return self.objective in ("adv", "adv_plus_source")


@dataclass
class EpochMetrics:
    """Mean loss and training accuracy (percent) of one epoch"""
    epoch: int
    loss: float
    accuracy: float


@dataclass
class EnsembleModel:
    """Seed ensemble aggregated by the mean of member softmax outputs"""
    members: List[Tuple[ModelParams, ModelConfig]]
    aggregation: Literal["mean_softmax"] = "mean_softmax"

    def __post_init__(self):
        if not self.members:
            raise ValidationError("An ensemble needs at least one member")
        shapes = {(cfg.c, cfg.t, cfg.K) for _, cfg in self.members}
        if len(shapes) != 1:
            raise ValidationError(f"Ensemble members disagree on (c, t, K): {sorted(shapes)}")

    @property
    def config(self) -> ModelConfig:
        return self.members[0][1]

    def __len__(self) -> int:
        return len(self.members)


class FedConfig(BaseModel):
    """Simulated federated pretraining"""
    rounds: int = Field(10, ge=1)
    local_epochs: int = Field(1, ge=0)
    client_fraction: float = Field(1.0, gt=0.0, le=1.0)
    bn_policy: Literal["exclude_bn_stats", "include_all"] = "exclude_bn_stats"
    client_seeding: Literal["per_client", "shared"] = "per_client"
    seed: int = 0
    train: TrainConfig = Field(default_factory=TrainConfig)


@dataclass
class ClientUpdate:
    """What a client sends back after local training: parameters, never data"""
    client_id: int
    params: ModelParams
    n_samples: int
    local_loss: float = float("nan")

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError(f"Client {self.client_id} reported n_samples={self.n_samples}")


@dataclass
class RoundLog:
    """One federated round as written to the round-by-round log"""
    round: int
    selected_clients: List[int]
    local_loss: Dict[int, float] = field(default_factory=dict)
    global_metric: Optional[float] = None
