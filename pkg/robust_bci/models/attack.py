"""Adversarial attack and evaluation-noise configuration"""
from typing import Optional

from pydantic import BaseModel, Field, model_validator


class AttackConfig(BaseModel):
    """PGD settings; ``epsilon`` and ``alpha`` are multiples of each channel's standard deviation.

    ``alpha`` defaults to ``epsilon / 4`` when left unset.
    """
    epsilon: float = Field(0.03, ge=0.0)
    alpha: Optional[float] = Field(None, ge=0.0)
    steps: int = Field(10, ge=1)
    random_start: bool = True
    seed: int = 0

    @model_validator(mode="after")
    def _alpha_within_epsilon(self) -> "AttackConfig":
        if self.alpha is not None and self.alpha > self.epsilon:
            raise ValueError(f"alpha ({self.alpha}) must not exceed epsilon ({self.epsilon})")
        return self

    @property
    def step_size(self) -> float:
        return self.epsilon / 4.0 if self.alpha is None else self.alpha

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        """Same attack at another radius; an explicit alpha is rescaled proportionally."""
        alpha = None
        if self.alpha is not None and self.epsilon > 0:
            alpha = self.alpha * epsilon / self.epsilon
        return AttackConfig(epsilon=epsilon, alpha=alpha, steps=self.steps,
                            random_start=self.random_start, seed=self.seed)


class NoiseConfig(BaseModel):
    """Uniform evaluation noise of ``eta`` channel standard deviations"""
    eta: float = Field(1.0, ge=0.0)
    seed: int = 0
