"""User-wise source perturbations"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from robust_bci.models.training import TrainConfig


class PrivacyConfig(BaseModel):
    rho: float = Field(0.3, gt=0.0, description="Peak perturbation amplitude as a fraction of the median channel std")
    seed: int = 0
    band_hz: Tuple[float, float] = (8.0, 30.0)
    n_components: int = Field(3, ge=1)
    probe: TrainConfig = Field(default_factory=lambda: TrainConfig(epochs=30))

    @model_validator(mode="after")
    def _check_band(self) -> "PrivacyConfig":
        lo, hi = self.band_hz
        if not 0 < lo < hi:
            raise ValueError(f"Invalid perturbation band {self.band_hz}")
        return self


@dataclass
class UserPerturbation:
    """One additive ``[c, t]`` pattern per source user"""
    deltas: Dict[int, np.ndarray]
    rho: float
    seed: int
    bound: float

    def users(self) -> List[int]:
        return sorted(self.deltas)

    def __getitem__(self, user: int) -> np.ndarray:
        return self.deltas[user]


@dataclass
class PrivacyAudit:
    """User-identification accuracy (percent) before and after perturbation"""
    clean_accuracy: float
    perturbed_accuracy: float
    chance: float
    rho: float
    n_users: int
