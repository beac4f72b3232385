"""Euclidean alignment: whiten trials by the inverse square root of their mean spatial covariance"""
import logging
from typing import Dict, Tuple

import numpy as np

from robust_bci.errors import DimensionError, LeakageError, ValidationError
from robust_bci.models.network import AlignmentState
from robust_bci.models.trial import TrialSet
from robust_bci.numerics.linalg import inv_sqrt_psd_report
from robust_bci.numerics.tensor import Tensor

logger = logging.getLogger(__name__)


class HeldOutTrials:
    """Test trials that may be aligned with a given state but never fitted on.

    The wrapped set is only reachable through ``align``; fitting APIs reject this type.
    """

    __slots__ = ("_trials",)

    def __init__(self, trials: TrialSet):
        self._trials = trials

    def __len__(self) -> int:
        return len(self._trials)

    @property
    def n_channels(self) -> int:
        return self._trials.n_channels

    def align(self, state: AlignmentState) -> TrialSet:
        return apply_alignment(state, self._trials)


def reject_held_out(obj, operation: str) -> None:
    if isinstance(obj, HeldOutTrials):
        raise LeakageError(f"{operation} must not be fitted on held-out test trials")


def mean_covariance(signals: np.ndarray) -> np.ndarray:
    """``(1/N) sum_i X_i X_i^T`` accumulated in float64 (no centring, no trace normalisation)."""
    x = signals.astype(np.float64)
    return np.einsum("nct,ndt->cd", x, x) / x.shape[0]


def fit_alignment(ts: TrialSet) -> AlignmentState:
    reject_held_out(ts, "Alignment")
    if len(ts) == 0:
        raise ValidationError("Cannot fit an alignment on an empty trial set")
    r_bar = mean_covariance(ts.signals)
    r_bar = 0.5 * (r_bar + r_bar.T)
    w, n_clamped = inv_sqrt_psd_report(r_bar)
    if n_clamped:
        logger.warning(f"Alignment on '{ts.name}' clamped {n_clamped} eigenvalue(s); "
                       f"the mean covariance of {len(ts)} trials is rank deficient")
    return AlignmentState(r_bar=Tensor.wrap(r_bar), w=w, n_trials_used=len(ts), n_clamped=n_clamped)


def apply_alignment(state: AlignmentState, ts: TrialSet) -> TrialSet:
    """Replace every trial ``X`` by ``w X``; labels and users are untouched."""
    if ts.n_channels != state.n_channels:
        raise DimensionError(f"Alignment is for {state.n_channels} channels, trials have {ts.n_channels}")
    aligned = np.einsum("cd,ndt->nct", state.w.data.astype(np.float64), ts.signals.astype(np.float64))
    return ts.with_signals(aligned.astype(np.float32))


def fit_per_user(ts: TrialSet) -> Dict[int, AlignmentState]:
    reject_held_out(ts, "Alignment")
    return {u: fit_alignment(ts.subset(np.flatnonzero(ts.users == u))) for u in ts.user_ids()}


def align_per_user(ts: TrialSet) -> Tuple[TrialSet, Dict[int, AlignmentState]]:
    """Align each user's trials with that user's own state; trial order is preserved."""
    states = fit_per_user(ts)
    signals = np.empty_like(ts.signals)
    for u, state in states.items():
        idx = np.flatnonzero(ts.users == u)
        signals[idx] = apply_alignment(state, ts.subset(idx)).signals
    logger.info(f"Aligned '{ts.name}' per user ({len(states)} users)")
    return ts.with_signals(signals), states
