from __future__ import annotations

from typing import Callable, Dict, Optional

import numpy as np
import pytest

from robust_bci.models.network import ModelConfig, ModelParams
from robust_bci.models.trial import SynthSpec, TrialSet
from robust_bci.numerics.tensor import Tensor
from robust_bci.services.network import init_params
from robust_bci.services.synthetic import generate_synthetic

TINY_MODEL = dict(f1=2, d=2, temporal_kernel_len=8, separable_kernel_len=4, pool1=4, pool2=2)


def _central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        original = x[idx]
        x[idx] = original + h
        upper = f(x)
        x[idx] = original - h
        lower = f(x)
        x[idx] = original
        grad[idx] = (upper - lower) / (2 * h)
    return grad


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def _make_trialset(signals, *, labels=None, users=None, n_classes: int = 2, n_users: Optional[int] = None,
                   name: str = "fixture", sample_rate_hz: float = 128.0) -> TrialSet:
    signals = np.asarray(signals, dtype=np.float32)
    n = signals.shape[0]
    labels = np.asarray(labels if labels is not None else (np.arange(n) % n_classes) + 1)
    users = np.asarray(users if users is not None else np.ones(n, dtype=np.int64))
    return TrialSet(signals=signals, labels=labels, users=users, n_classes=n_classes,
                    n_users=n_users or max(int(users.max(initial=1)), 1), name=name,
                    sample_rate_hz=sample_rate_hz)


def _as_float64(params: ModelParams) -> ModelParams:
    return ModelParams(
        weights={k: v.astype(np.float64) for k, v in params.weights.items()},
        bn_stats={k: v.copy() for k, v in params.bn_stats.items()},
        bn_mode_override=params.bn_mode_override,
    )


def _replace_weight(params: ModelParams, name: str, value: np.ndarray) -> ModelParams:
    weights: Dict[str, Tensor] = dict(params.weights)
    weights[name] = Tensor(value, dtype=params.weights[name].dtype)
    return ModelParams(weights=weights, bn_stats=params.bn_stats, bn_mode_override=params.bn_mode_override)


@pytest.fixture
def finite_difference():
    return _central_difference


@pytest.fixture
def relative_error():
    return _relative_error


@pytest.fixture
def make_trialset():
    return _make_trialset


@pytest.fixture
def as_float64():
    return _as_float64


@pytest.fixture
def replace_weight():
    return _replace_weight


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(c=4, t=32, K=2, **TINY_MODEL)


@pytest.fixture
def tiny_params(tiny_cfg) -> ModelParams:
    return init_params(tiny_cfg, seed=0)


@pytest.fixture
def small_spec() -> SynthSpec:
    return SynthSpec(c=4, t=32, K=2, U=3, trials_per_class_per_user=6, seed=3, name="small")


@pytest.fixture
def small_set(small_spec) -> TrialSet:
    return generate_synthetic(small_spec)


@pytest.fixture
def tiny_model_overrides() -> dict:
    return dict(TINY_MODEL)
