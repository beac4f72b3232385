"""Band-pass filtering, resampling, epoch cropping and calibration splits"""
import logging
from fractions import Fraction
from typing import Tuple, Union

import numpy as np
from scipy import signal as sps

from robust_bci.errors import UnsupportedOperationError, ValidationError
from robust_bci.models.trial import Trial, TrialSet

logger = logging.getLogger(__name__)

FIR_TAPS = 101
FIR_REFERENCE_RATE_HZ = 128.0
EPOCH_WINDOW_S = (0.0, 4.0)

TrialLike = Union[Trial, TrialSet]


def _signals(x: TrialLike) -> np.ndarray:
    return x.signal if isinstance(x, Trial) else x.signals


def _rebuild(x: TrialLike, signals: np.ndarray, sample_rate_hz: float = None) -> TrialLike:
    rate = x.sample_rate_hz if sample_rate_hz is None else sample_rate_hz
    signals = signals.astype(np.float32)
    if isinstance(x, Trial):
        return Trial(signal=signals, label=x.label, user=x.user, sample_rate_hz=rate)
    return TrialSet(signals=signals, labels=x.labels, users=x.users, n_classes=x.n_classes,
                    n_users=x.n_users, name=x.name, sample_rate_hz=rate)


def fir_numtaps(sample_rate_hz: float) -> int:
    """Odd tap count giving the same transition width in Hz as FIR_TAPS at the reference rate."""
    return max(int(round(FIR_TAPS * sample_rate_hz / FIR_REFERENCE_RATE_HZ)) | 1, 3)


def bandpass_taps(lo_hz: float, hi_hz: float, sample_rate_hz: float) -> np.ndarray:
    if not 0 < lo_hz < hi_hz < sample_rate_hz / 2:
        raise ValidationError(f"Invalid band [{lo_hz}, {hi_hz}] Hz for sample rate {sample_rate_hz} Hz")
    return sps.firwin(fir_numtaps(sample_rate_hz), [lo_hz, hi_hz], pass_zero=False, window="hamming",
                      fs=sample_rate_hz)


def bandpass(x: TrialLike, lo_hz: float, hi_hz: float) -> TrialLike:
    """Zero-phase Hamming-window FIR band-pass applied per channel (forward and backward)."""
    taps = bandpass_taps(lo_hz, hi_hz, x.sample_rate_hz)
    data = _signals(x).astype(np.float64)
    t = data.shape[-1]
    padlen = min(3 * len(taps), t - 1)
    filtered = sps.filtfilt(taps, [1.0], data, axis=-1, padlen=padlen)
    return _rebuild(x, filtered)


def resample(x: TrialLike, target_hz: float) -> TrialLike:
    """Polyphase rational resampling to ``target_hz`` (downsampling only)."""
    source_hz = x.sample_rate_hz
    if target_hz > source_hz:
        raise UnsupportedOperationError(f"Upsampling from {source_hz} Hz to {target_hz} Hz is not supported")
    if target_hz <= 0:
        raise ValidationError(f"target_hz must be positive, got {target_hz}")
    if target_hz == source_hz:
        return x
    ratio = Fraction(target_hz / source_hz).limit_denominator(1000)
    data = _signals(x).astype(np.float64)
    t = data.shape[-1]
    out_len = int(round(t * target_hz / source_hz))
    resampled = sps.resample_poly(data, ratio.numerator, ratio.denominator, axis=-1, padtype="line")
    logger.debug(f"Resampled {source_hz} Hz -> {target_hz} Hz (up={ratio.numerator}, down={ratio.denominator})")
    return _rebuild(x, resampled[..., :out_len], sample_rate_hz=float(target_hz))


def crop_epoch(x: TrialLike, window_s: Tuple[float, float] = EPOCH_WINDOW_S) -> TrialLike:
    """Keep samples in ``[start, stop)`` seconds from trial onset."""
    start_s, stop_s = window_s
    rate = x.sample_rate_hz
    start, stop = int(round(start_s * rate)), int(round(stop_s * rate))
    t = _signals(x).shape[-1]
    if not 0 <= start < stop <= t:
        raise ValidationError(f"Epoch window {window_s} s does not fit a {t / rate:.3f} s trial")
    return _rebuild(x, _signals(x)[..., start:stop])


def preprocess(ts: TrialSet, band: Tuple[float, float] = (8.0, 32.0), target_hz: float = 128.0,
               window_s: Tuple[float, float] = EPOCH_WINDOW_S) -> TrialSet:
    """Band-pass, resample, then crop to the epoch window."""
    out = bandpass(ts, *band)
    out = resample(out, target_hz)
    out = crop_epoch(out, window_s)
    logger.info(f"Preprocessed '{ts.name}': band={band} Hz, {target_hz} Hz, window={window_s} s, "
                f"t={out.n_timepoints}")
    return out


def split_calibration(ts: TrialSet, fraction: float) -> Tuple[TrialSet, TrialSet]:
    """Chronological split: the first ``floor(fraction * N)`` trials calibrate, the rest test."""
    if not 0 < fraction < 1:
        raise ValidationError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(ts)
    n_cal = int(np.floor(fraction * n + 1e-9))
    if n_cal == 0 or n_cal == n:
        raise ValidationError(f"Calibration split of {n} trials at fraction {fraction} leaves an empty side")
    return (ts.subset(range(n_cal), name=f"{ts.name}-calibration"),
            ts.subset(range(n_cal, n), name=f"{ts.name}-test"))
