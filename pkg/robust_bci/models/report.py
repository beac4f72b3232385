"""Scenario configuration and evaluation report models"""
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, Field, model_validator

from robust_bci.models.training import FedConfig, TrainConfig
from robust_bci.models.privacy import PrivacyConfig
from robust_bci.models.trial import SynthSpec

Scenario = Literal["centralized_source_free", "federated_source_free", "source_perturbation", "no_privacy"]
Method = Literal["ce", "abat", "abat_e", "ar", "are"]

SOURCE_FREE_SCENARIOS = ("centralized_source_free", "federated_source_free")


class EvalGridConfig(BaseModel):
    """Benign / adversarial / noisy evaluation protocol"""
    epsilons: List[float] = Field(default_factory=lambda: [0.01, 0.03, 0.05])
    etas: List[float] = Field(default_factory=lambda: [1.0, 2.0, 3.0])
    noise_draws: int = Field(3, ge=1)
    attack_steps: int = Field(10, ge=1)
    random_start: bool = True

    @model_validator(mode="after")
    def _non_negative(self) -> "EvalGridConfig":
        if not self.epsilons or not self.etas:
            raise ValueError("epsilons and etas must be non-empty")
        if min(self.epsilons) < 0 or min(self.etas) < 0:
            raise ValueError("epsilons and etas must be non-negative")
        return self


class ScenarioConfig(BaseModel):
    """Everything needed to run one (scenario, method) experiment"""
    scenario: Scenario = "centralized_source_free"
    method: Method = "are"
    calibration_fractions: List[float] = Field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5, 0.6])
    repeats: int = Field(5, ge=1)
    master_seed: int = 0
    synth: Optional[SynthSpec] = Field(default_factory=lambda: SynthSpec.preset("desk"))
    source_path: Optional[str] = None
    target_path: Optional[str] = None
    target_user: Optional[int] = Field(None, description="User held out as target; defaults to the highest id")
    checkpoint_path: Optional[str] = None
    model: Dict[str, Any] = Field(default_factory=dict, description="ModelConfig overrides")
    pretrain: TrainConfig = Field(default_factory=TrainConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    fed: FedConfig = Field(default_factory=FedConfig)
    privacy: PrivacyConfig = Field(default_factory=PrivacyConfig)
    grid: EvalGridConfig = Field(default_factory=EvalGridConfig)
    ensemble_size: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _check_compatibility(self) -> "ScenarioConfig":
        for f in self.calibration_fractions:
            if not 0 < f < 1:
                raise ValueError(f"Calibration fractions must lie in (0, 1), got {f}")
        if not self.calibration_fractions:
            raise ValueError("At least one calibration fraction is required")
        if (self.source_path is None) != (self.target_path is None):
            raise ValueError("source_path and target_path must be given together")
        if self.synth is None and self.source_path is None:
            raise ValueError(f"Scenario '{self.scenario}' needs a source set: set synth or source_path")
        if self.checkpoint_path is not None and self.scenario not in SOURCE_FREE_SCENARIOS:
            raise ValueError("checkpoint_path only applies to source-free scenarios")
        if self.scenario == "federated_source_free" and self.checkpoint_path is None and self.synth is not None \
                and self.synth.U < 2:
            raise ValueError("Federated pretraining needs at least one source user besides the target")
        return self

    @property
    def is_ensemble(self) -> bool:
        return self.method in ("abat_e", "are")


class AccuracyRow(BaseModel):
    """Benign, per-epsilon adversarial and per-eta noisy accuracies (percent) with their means"""
    benign: Optional[float] = None
    adversarial: Dict[str, float] = Field(default_factory=dict)
    noisy: Dict[str, float] = Field(default_factory=dict)
    adversarial_mean: Optional[float] = None
    noisy_mean: Optional[float] = None
    avg: Optional[float] = None


class CellResult(AccuracyRow):
    """Accuracies (percent) of one (fraction, repeat) cell; failed cells carry the error instead"""
    fraction: float
    repeat: int
    seed: int
    failed: bool = False
    error: Optional[str] = None


class SummaryRow(BaseModel):
    """Column means over cells; ``fraction`` is None for the overall row"""
    fraction: Optional[float] = None
    benign: Optional[float] = None
    adversarial: Optional[float] = None
    noisy: Optional[float] = None
    avg: Optional[float] = None
    n_cells: int = 0
    n_failed: int = 0


class EvalReport(BaseModel):
    scenario: str
    method: str
    master_seed: int
    epsilons: List[float]
    etas: List[float]
    cells: List[CellResult] = Field(default_factory=list)
    per_fraction: List[SummaryRow] = Field(default_factory=list)
    overall: SummaryRow = Field(default_factory=SummaryRow)
