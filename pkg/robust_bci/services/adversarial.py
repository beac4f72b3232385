"""PGD adversarial examples within per-channel l-infinity balls, and evaluation noise"""
import logging
from typing import Callable, Optional

import numpy as np

from robust_bci.errors import DimensionError, ValidationError
from robust_bci.models.attack import AttackConfig, NoiseConfig
from robust_bci.models.network import ModelConfig, ModelParams
from robust_bci.numerics.tensor import GradTape, Tensor
from robust_bci.services.network import cross_entropy, forward

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], np.ndarray]


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def channel_std_array(x) -> np.ndarray:
    """Population standard deviation over the last (time) axis, in float64."""
    data = _values(x)
    if data.ndim < 2:
        raise DimensionError(f"Expected (..., channels, time), got shape {data.shape}")
    if data.shape[-1] < 2:
        raise ValidationError(f"Channel std needs at least 2 samples, got {data.shape[-1]}")
    x64 = data.astype(np.float64)
    centred = x64 - x64.mean(axis=-1, keepdims=True)
    return np.sqrt(np.mean(centred * centred, axis=-1))


def channel_std(x) -> Tensor:
    return Tensor.wrap(channel_std_array(x).astype(np.float32))


def _store_within(origin: np.ndarray, target: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Round ``target`` to float32 and step any element that lands outside its ball one ulp inward."""
    out = target.astype(np.float32)
    diff = out.astype(np.float64) - origin
    high, low = diff > radius, diff < -radius
    if high.any():
        out[high] = np.nextafter(out[high], np.float32(-np.inf))
    if low.any():
        out[low] = np.nextafter(out[low], np.float32(np.inf))
    return out


def projected_gradient_ascent(x: np.ndarray, grad_fn: GradFn, atk: AttackConfig) -> np.ndarray:
    """Model-agnostic PGD on a stack ``[..., c, t]``.

    ``grad_fn`` maps the current iterate to the loss gradient. Per-channel radii
    ``epsilon * std`` are taken from the benign input and held fixed; every stored
    iterate lies inside the ball.
    """
    x = np.asarray(x, dtype=np.float32)
    if atk.epsilon == 0:
        return x.copy()
    x64 = x.astype(np.float64)
    sigma = channel_std_array(x)[..., None]
    radius = atk.epsilon * sigma
    step = atk.step_size * sigma

    if atk.random_start:
        rng = np.random.default_rng(atk.seed)
        delta = rng.uniform(-1.0, 1.0, size=x.shape) * radius
    else:
        delta = np.zeros_like(x64)
    x_adv = _store_within(x64, x64 + delta, radius)

    for _ in range(atk.steps):
        g = np.asarray(grad_fn(x_adv), dtype=np.float64)
        delta = x_adv.astype(np.float64) - x64 + step * np.sign(g)
        delta = np.clip(delta, -radius, radius)
        x_adv = _store_within(x64, x64 + delta, radius)
    return x_adv


def model_input_gradient(params: ModelParams, cfg: ModelConfig, signals: np.ndarray,
                         labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input batch (eval-mode BN)."""
    tape = GradTape()
    x = Tensor.wrap(np.array(signals, dtype=np.float32))
    with tape:
        loss = cross_entropy(forward(params, cfg, x, mode="eval"), labels)
    return tape.gradient(loss, [x])[0].data


def pgd_attack_batch(params: ModelParams, cfg: ModelConfig, signals: np.ndarray, labels: np.ndarray,
                     atk: AttackConfig, grad_fn: Optional[GradFn] = None) -> np.ndarray:
    labels = np.asarray(labels)
    if grad_fn is None:
        def grad_fn(x_adv):
            return model_input_gradient(params, cfg, x_adv, labels)
    return projected_gradient_ascent(signals, grad_fn, atk)


def pgd_attack(params: ModelParams, cfg: ModelConfig, x, y: int, atk: AttackConfig) -> Tensor:
    """Adversarial counterpart of one trial ``[c, t]`` with label ``y``."""
    data = _values(x)
    if data.ndim != 2:
        raise DimensionError(f"pgd_attack expects one trial (c, t), got {data.shape}")
    adv = pgd_attack_batch(params, cfg, data[None], np.array([y]), atk)
    return Tensor.wrap(adv[0])


def noisy_batch(signals, nz: NoiseConfig) -> np.ndarray:
    """``X + eta * std(channel) * U(-1, 1)`` elementwise, seeded by ``nz.seed``."""
    x = np.asarray(_values(signals), dtype=np.float32)
    if nz.eta == 0:
        return x.copy()
    x64 = x.astype(np.float64)
    radius = nz.eta * channel_std_array(x)[..., None]
    rng = np.random.default_rng(nz.seed)
    return _store_within(x64, x64 + radius * rng.uniform(-1.0, 1.0, size=x.shape), radius)


def noisy_sample(x, nz: NoiseConfig) -> Tensor:
    return Tensor.wrap(noisy_batch(x, nz))
