"""Classifier configuration, parameters and alignment state"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator

from robust_bci.numerics.tensor import Tensor

BN_LAYERS = ("bn1", "bn2", "bn3")


class ModelConfig(BaseModel):
    """Shape and hyperparameters of the compact convolutional classifier"""
    c: int = Field(..., ge=1, description="Input channels")
    t: int = Field(..., ge=1, description="Input samples")
    K: int = Field(..., ge=2, description="Number of classes")
    f1: int = Field(4, ge=1, description="Temporal filters")
    d: int = Field(2, ge=1, description="Spatial filters per temporal filter")
    temporal_kernel_len: int = Field(32, ge=1)
    separable_kernel_len: int = Field(16, ge=1)
    pool1: int = Field(4, ge=1)
    pool2: int = Field(8, ge=1)
    dropout_rate: float = Field(0.25, ge=0.0, lt=1.0)
    bn_mode: Literal["running", "batch"] = "running"
    bn_momentum: float = Field(0.1, gt=0.0, le=1.0)
    bn_eps: float = Field(1e-5, gt=0.0)

    @model_validator(mode="after")
    def _check_pooling(self) -> "ModelConfig":
        if self.t % self.pool1:
            raise ValueError(f"pool1={self.pool1} does not divide t={self.t}")
        if (self.t // self.pool1) % self.pool2:
            raise ValueError(f"pool2={self.pool2} does not divide t/pool1={self.t // self.pool1}")
        return self

    @property
    def f2(self) -> int:
        return self.f1 * self.d

    @property
    def n_features(self) -> int:
        return self.f2 * (self.t // (self.pool1 * self.pool2))


@dataclass
class BatchNormStats:
    """Running statistics of one batch-norm layer"""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1

    def copy(self) -> "BatchNormStats":
        return BatchNormStats(self.running_mean.copy(), self.running_var.copy(), self.momentum)


@dataclass
class ModelParams:
    """Named parameter tensors plus per-layer batch-norm running statistics.

    ``bn_mode_override`` is set on federated-pretrained models so evaluation
    normalises with batch statistics regardless of the config default.
    """
    weights: Dict[str, Tensor]
    bn_stats: Dict[str, BatchNormStats] = field(default_factory=dict)
    bn_mode_override: Optional[str] = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            weights=dict(self.weights),
            bn_stats={k: v.copy() for k, v in self.bn_stats.items()},
            bn_mode_override=self.bn_mode_override,
        )

    def names(self):
        return sorted(self.weights)

    def bit_equal(self, other: "ModelParams") -> bool:
        if self.names() != other.names() or sorted(self.bn_stats) != sorted(other.bn_stats):
            return False
        for name in self.names():
            a, b = self.weights[name].data, other.weights[name].data
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        for name, stats in self.bn_stats.items():
            o = other.bn_stats[name]
            if stats.running_mean.tobytes() != o.running_mean.tobytes():
                return False
            if stats.running_var.tobytes() != o.running_var.tobytes():
                return False
        return True


@dataclass(frozen=True)
class AlignmentState:
    """Mean spatial covariance ``r_bar`` and its inverse square root ``w``, both float64"""
    r_bar: Tensor
    w: Tensor
    n_trials_used: int
    n_clamped: int = 0

    @property
    def n_channels(self) -> int:
        return self.w.shape[0]


@dataclass
class Checkpoint:
    """A trained classifier with everything inference needs"""
    params: ModelParams
    config: ModelConfig
    alignment: Optional[AlignmentState] = None


class TensorEntry(BaseModel):
    name: str
    shape: List[int] = Field(..., description="Dimensions, row-major")
    offset: int = Field(..., ge=0, description="Byte offset into the payload")


class BatchNormEntry(BaseModel):
    momentum: float = Field(..., gt=0.0, le=1.0)


class AlignmentBlock(BaseModel):
    r_bar: List[List[float]]
    w: List[List[float]]
    n_trials_used: int = Field(..., ge=0)
    n_clamped: int = Field(0, ge=0)


class CheckpointHeader(BaseModel):
    """JSON header of a checkpoint file"""
    config: ModelConfig
    tensors: List[TensorEntry]
    bn: Dict[str, BatchNormEntry]
    bn_mode_override: Optional[Literal["running", "batch"]] = None
    alignment: Optional[AlignmentBlock] = None
    payload_bytes: Optional[int] = Field(None, ge=0)
