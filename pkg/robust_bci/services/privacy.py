"""User-wise source perturbations and the user-identification probe"""
import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np

from robust_bci.errors import ValidationError
from robust_bci.models.network import ModelConfig
from robust_bci.models.privacy import PrivacyAudit, PrivacyConfig, UserPerturbation
from robust_bci.models.training import TrainConfig
from robust_bci.models.trial import TrialSet
from robust_bci.services.network import init_params, predict
from robust_bci.services.training import train
from robust_bci.utils.seeding import derive_seed

logger = logging.getLogger(__name__)


def median_channel_std(ts: TrialSet) -> float:
    """Median over channels of the population std pooled over all trials and samples."""
    pooled = np.moveaxis(ts.signals, 1, 0).reshape(ts.n_channels, -1).astype(np.float64)
    return float(np.median(pooled.std(axis=1)))


def _band_bins(t: int, sample_rate_hz: float, band: Tuple[float, float], n_components: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(t, d=1.0 / sample_rate_hz)
    candidates = freqs[(freqs >= band[0]) & (freqs <= band[1]) & (freqs > 0) & (freqs < sample_rate_hz / 2)]
    if len(candidates) < n_components:
        raise ValidationError(f"Band {band} Hz holds only {len(candidates)} frequency bins for t={t}")
    return candidates


def _user_frequencies(bins: np.ndarray, seed: int, user: int, n_components: int) -> np.ndarray:
    """Bins of a seed-keyed permutation, taken in slots keyed by user id.

    Users whose slots do not wrap around the band get disjoint frequency sets,
    so their patterns are orthogonal over the trial window.
    """
    order = np.random.default_rng(derive_seed(seed, "frequency-order")).permutation(len(bins))
    slots = ((user - 1) * n_components + np.arange(n_components)) % len(bins)
    return bins[order[slots]]


def _user_pattern(rng: np.random.Generator, frequencies: np.ndarray, c: int, t: int,
                  sample_rate_hz: float) -> np.ndarray:
    phases = rng.uniform(0.0, 2 * np.pi, size=len(frequencies))
    time = np.arange(t) / sample_rate_hz
    waves = np.sin(2 * np.pi * frequencies[:, None] * time[None, :] + phases[:, None])
    mixing = rng.standard_normal((c, len(frequencies)))
    return mixing @ waves


def generate_user_perturbations(source: TrialSet, rho: float, seed: int,
                                band_hz: Tuple[float, float] = (8.0, 30.0),
                                n_components: int = 3) -> UserPerturbation:
    """One structured additive pattern per user, peak-normalised to ``rho * median channel std``.

    Each pattern mixes ``n_components`` sinusoids at user-keyed FFT-bin frequencies
    inside ``band_hz`` through a user-keyed random spatial matrix.
    """
    if rho <= 0:
        raise ValidationError(f"rho must be positive, got {rho}")
    if len(source) == 0:
        raise ValidationError("Cannot derive perturbations from an empty source set")
    bound = rho * median_channel_std(source)
    bins = _band_bins(source.n_timepoints, source.sample_rate_hz, band_hz, n_components)
    deltas: Dict[int, np.ndarray] = {}
    for u in source.user_ids():
        rng = np.random.default_rng(derive_seed(seed, "perturbation", u))
        pattern = _user_pattern(rng, _user_frequencies(bins, seed, u, n_components), source.n_channels,
                                source.n_timepoints, source.sample_rate_hz)
        peak = np.abs(pattern).max()
        deltas[u] = (pattern * (bound / peak if peak > 0 else 0.0)).astype(np.float32)
    logger.info(f"Generated perturbations for {len(deltas)} users (rho={rho}, peak={bound:.4f})")
    return UserPerturbation(deltas=deltas, rho=rho, seed=seed, bound=bound)


def _shifted(source: TrialSet, p: UserPerturbation, sign: float, name: str) -> TrialSet:
    missing = [u for u in source.user_ids() if u not in p.deltas]
    if missing:
        raise ValidationError(f"No perturbation for users {missing}")
    signals = source.signals.copy()
    for u in source.user_ids():
        idx = source.users == u
        delta = p.deltas[u]
        if delta.shape != source.shape:
            raise ValidationError(f"Perturbation for user {u} has shape {delta.shape}, trials are {source.shape}")
        signals[idx] = signals[idx] + np.float32(sign) * delta
    return source.with_signals(signals, name=name)


def apply_perturbations(source: TrialSet, p: UserPerturbation) -> TrialSet:
    """``X + delta_u`` for every trial of user ``u``."""
    return _shifted(source, p, 1.0, f"{source.name}-perturbed")


def remove_perturbations(perturbed: TrialSet, p: UserPerturbation) -> TrialSet:
    return _shifted(perturbed, p, -1.0, perturbed.name.replace("-perturbed", ""))


def user_id_probe(train_set: TrialSet, test_set: TrialSet, cfg: TrainConfig,
                  model: Optional[Dict[str, Any]] = None) -> float:
    """Accuracy (percent) of a classifier trained to tell users apart.

    The standard model is trained with user ids as labels on ``train_set`` and
    scored on ``test_set``.
    """
    vocabulary = train_set.user_ids()
    if len(vocabulary) < 2:
        raise ValidationError(f"User-ID probe needs at least 2 users, got {len(vocabulary)}")
    unknown = sorted(set(test_set.user_ids()) - set(vocabulary))
    if unknown:
        raise ValidationError(f"Test users {unknown} do not appear in the probe's training set")
    index = {u: i + 1 for i, u in enumerate(vocabulary)}

    def relabel(ts: TrialSet) -> TrialSet:
        return ts.with_labels(np.array([index[int(u)] for u in ts.users]), n_classes=len(vocabulary),
                              name=f"{ts.name}-user-id")

    cfg_model = ModelConfig(c=train_set.n_channels, t=train_set.n_timepoints, K=len(vocabulary), **(model or {}))
    probe_cfg = cfg.model_copy(update={"objective": "ce", "augmentation": "none"})
    params = train(init_params(cfg_model, derive_seed(cfg.seed, "probe")), cfg_model, relabel(train_set), probe_cfg)
    test = relabel(test_set)
    accuracy = float(100.0 * np.mean(predict(params, cfg_model, test.signals) == test.labels))
    logger.info(f"User-ID probe: {accuracy:.1f}% over {len(vocabulary)} users (chance {100.0 / len(vocabulary):.1f}%)")
    return accuracy


def chronological_halves(ts: TrialSet) -> Tuple[TrialSet, TrialSet]:
    """Per user, the first half of their trials versus the second half."""
    first, second = [], []
    for u in ts.user_ids():
        idx = np.flatnonzero(ts.users == u)
        half = len(idx) // 2
        first.extend(idx[:half])
        second.extend(idx[half:])
    return ts.subset(first, name=f"{ts.name}-first"), ts.subset(second, name=f"{ts.name}-second")


def privacy_audit(source: TrialSet, cfg: PrivacyConfig, model: Optional[Dict[str, Any]] = None) -> PrivacyAudit:
    """User-ID probe on clean and perturbed training halves, both scored on clean held-back trials."""
    perturbation = generate_user_perturbations(source, cfg.rho, cfg.seed, cfg.band_hz, cfg.n_components)
    train_half, test_half = chronological_halves(source)
    clean = user_id_probe(train_half, test_half, cfg.probe, model)
    perturbed = user_id_probe(apply_perturbations(train_half, perturbation), test_half, cfg.probe, model)
    n_users = len(source.user_ids())
    return PrivacyAudit(clean_accuracy=clean, perturbed_accuracy=perturbed, chance=100.0 / n_users,
                        rho=cfg.rho, n_users=n_users)
