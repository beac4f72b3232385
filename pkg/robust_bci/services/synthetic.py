"""Synthetic multi-user motor-imagery-like EEG"""
import logging
from typing import Tuple

import numpy as np

from robust_bci.models.trial import SynthSpec, TrialSet

logger = logging.getLogger(__name__)

PATTERN_BAND_HZ = (4.0, 40.0)


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x.astype(np.float64) ** 2, axis=-1, keepdims=True))
    return x / np.where(rms > 0, rms, 1.0)


def band_limited(rng: np.random.Generator, shape: Tuple[int, ...], band: Tuple[float, float],
                 sample_rate_hz: float) -> np.ndarray:
    """Gaussian noise restricted to ``band`` by an rFFT mask, unit RMS per row."""
    t = shape[-1]
    spectrum = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    freqs = np.fft.rfftfreq(t, d=1.0 / sample_rate_hz)
    lo, hi = band
    spectrum[..., (freqs < lo) | (freqs > hi)] = 0
    return _unit_rms(np.fft.irfft(spectrum, n=t, axis=-1))


def pink_white_noise(rng: np.random.Generator, shape: Tuple[int, ...], sample_rate_hz: float) -> np.ndarray:
    """Equal-power mix of 1/f and white noise, unit variance per row on average."""
    t = shape[-1]
    freqs = np.fft.rfftfreq(t, d=1.0 / sample_rate_hz)
    shaping = np.zeros_like(freqs)
    shaping[1:] = 1.0 / np.sqrt(freqs[1:])
    pink = np.fft.irfft(np.fft.rfft(rng.standard_normal(shape), axis=-1) * shaping, n=t, axis=-1)
    white = rng.standard_normal(shape)
    return (_unit_rms(pink) + white) / np.sqrt(2.0)


def class_templates(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Fixed ``[K, c, t]`` oscillations; class k lives on channels with ``i % K == k``."""
    templates = np.zeros((spec.K, spec.c, spec.t))
    for k, band in enumerate(spec.bands()):
        channels = [i for i in range(spec.c) if i % spec.K == k] or [k % spec.c]
        templates[k, channels] = band_limited(rng, (len(channels), spec.t), band, spec.sample_rate_hz)
    return templates


def block_randomised_labels(rng: np.random.Generator, n_classes: int, n_blocks: int) -> np.ndarray:
    """Every consecutive block of ``n_classes`` trials contains each class once (labels 1..K)."""
    return np.concatenate([rng.permutation(n_classes) + 1 for _ in range(n_blocks)])


def generate_synthetic(spec: SynthSpec) -> TrialSet:
    """Deterministic multi-user trial set for ``spec``.

    Each trial is ``M_u (sqrt(snr) a T_k + noise) + P_u`` where ``M_u`` is a
    user-specific spatial mixing, ``T_k`` the class template, ``a`` a per-trial
    amplitude jitter and ``P_u`` a fixed per-user pattern. Users occupy
    consecutive blocks of trials, numbered 1..U.
    """
    root = np.random.SeedSequence(spec.seed)
    template_seed, *user_seeds = root.spawn(spec.U + 1)
    templates = class_templates(spec, np.random.default_rng(template_seed))

    n_per_user = spec.K * spec.trials_per_class_per_user
    signals = np.empty((spec.U * n_per_user, spec.c, spec.t), dtype=np.float32)
    labels = np.empty(spec.U * n_per_user, dtype=np.int64)
    users = np.empty(spec.U * n_per_user, dtype=np.int64)

    for u, user_seed in enumerate(user_seeds, start=1):
        rng = np.random.default_rng(user_seed)
        mixing = np.eye(spec.c) + spec.user_offset_scale * rng.standard_normal((spec.c, spec.c)) / np.sqrt(spec.c)
        pattern = spec.user_pattern_scale * band_limited(rng, (spec.c, spec.t), PATTERN_BAND_HZ,
                                                          spec.sample_rate_hz)
        user_labels = block_randomised_labels(rng, spec.K, spec.trials_per_class_per_user)
        amplitudes = rng.uniform(0.75, 1.25, size=n_per_user)
        noise = pink_white_noise(rng, (n_per_user, spec.c, spec.t), spec.sample_rate_hz)

        source = np.sqrt(spec.snr) * amplitudes[:, None, None] * templates[user_labels - 1] + noise
        block = np.einsum("ij,njt->nit", mixing, source) + pattern

        start = (u - 1) * n_per_user
        signals[start:start + n_per_user] = block
        labels[start:start + n_per_user] = user_labels
        users[start:start + n_per_user] = u

    logger.info(f"Generated synthetic set '{spec.name}': {len(labels)} trials, "
                f"c={spec.c}, t={spec.t}, K={spec.K}, U={spec.U}")
    return TrialSet(
        signals=signals,
        labels=labels,
        users=users,
        n_classes=spec.K,
        n_users=spec.U,
        name=spec.name,
        sample_rate_hz=spec.sample_rate_hz,
    )
