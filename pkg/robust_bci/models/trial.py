"""Domain models for EEG trials and trial collections"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from robust_bci.errors import DimensionError, ValidationError


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Trial:
    """One EEG epoch (channels x time) with its task label and user identity"""
    signal: np.ndarray
    label: int
    user: int
    sample_rate_hz: float

    def __post_init__(self):
        if self.signal.ndim != 2:
            raise DimensionError(f"Trial signal must be 2-D (channels x time), got shape {self.signal.shape}")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")

    @property
    def n_channels(self) -> int:
        return self.signal.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.signal.shape[1]


@dataclass(frozen=True, eq=False)
class TrialSet:
    """Ordered, immutable collection of trials sharing (c, t) and a label/user vocabulary.

    Signals are stored stacked as float32 ``[N, c, t]``; order is chronological and
    meaningful (calibration splits take prefixes).
    """
    signals: np.ndarray
    labels: np.ndarray
    users: np.ndarray
    n_classes: int
    n_users: int
    name: str = "trials"
    sample_rate_hz: float = 128.0

    def __post_init__(self):
        signals = np.asarray(self.signals)
        if signals.ndim != 3:
            raise DimensionError(f"signals must be [N, c, t], got shape {signals.shape}")
        if signals.dtype != np.float32:
            signals = signals.astype(np.float32)
        if not np.all(np.isfinite(signals)):
            raise ValidationError(f"TrialSet '{self.name}' contains non-finite samples")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        n = signals.shape[0]
        if labels.shape[0] != n or users.shape[0] != n:
            raise DimensionError(f"Expected {n} labels and users, got {labels.shape[0]} and {users.shape[0]}")
        if self.n_classes < 1 or self.n_users < 1:
            raise ValidationError("n_classes and n_users must be at least 1")
        if n and (labels.min() < 1 or labels.max() > self.n_classes):
            raise ValidationError(f"Labels must lie in 1..{self.n_classes}")
        if n and (users.min() < 1 or users.max() > self.n_users):
            raise ValidationError(f"Users must lie in 1..{self.n_users}")
        if self.sample_rate_hz <= 0:
            raise ValidationError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "signals", _frozen(signals))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "users", _frozen(users))

    @property
    def n_channels(self) -> int:
        return self.signals.shape[1]

    @property
    def n_timepoints(self) -> int:
        return self.signals.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.n_channels, self.n_timepoints

    def __len__(self) -> int:
        return self.signals.shape[0]

    def __getitem__(self, index: int) -> Trial:
        return Trial(
            signal=self.signals[index],
            label=int(self.labels[index]),
            user=int(self.users[index]),
            sample_rate_hz=self.sample_rate_hz,
        )

    def __iter__(self) -> Iterator[Trial]:
        for i in range(len(self)):
            yield self[i]

    @property
    def trials(self) -> List[Trial]:
        return list(self)

    def user_ids(self) -> List[int]:
        return sorted(int(u) for u in np.unique(self.users))

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "TrialSet":
        idx = np.asarray(indices, dtype=np.int64)
        return TrialSet(
            signals=self.signals[idx],
            labels=self.labels[idx],
            users=self.users[idx],
            n_classes=self.n_classes,
            n_users=self.n_users,
            name=name or self.name,
            sample_rate_hz=self.sample_rate_hz,
        )

    def with_signals(self, signals: np.ndarray, name: Optional[str] = None) -> "TrialSet":
        """Same labels and users with replaced signals (shape may change along time)."""
        if signals.shape[0] != len(self):
            raise DimensionError(f"Expected {len(self)} signals, got {signals.shape[0]}")
        return TrialSet(
            signals=signals,
            labels=self.labels,
            users=self.users,
            n_classes=self.n_classes,
            n_users=self.n_users,
            name=name or self.name,
            sample_rate_hz=self.sample_rate_hz,
        )

    def with_labels(self, labels: np.ndarray, n_classes: int, name: Optional[str] = None) -> "TrialSet":
        return TrialSet(
            signals=self.signals,
            labels=labels,
            users=self.users,
            n_classes=n_classes,
            n_users=self.n_users,
            name=name or self.name,
            sample_rate_hz=self.sample_rate_hz,
        )

    def equals(self, other: "TrialSet") -> bool:
        """Field-by-field, bit-exact equality."""
        return (
            self.name == other.name
            and self.n_classes == other.n_classes
            and self.n_users == other.n_users
            and self.sample_rate_hz == other.sample_rate_hz
            and self.signals.shape == other.signals.shape
            and self.signals.tobytes() == other.signals.tobytes()
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.users, other.users)
        )

    @staticmethod
    def concatenate(parts: Sequence["TrialSet"], name: Optional[str] = None) -> "TrialSet":
        if not parts:
            raise ValidationError("Cannot concatenate an empty list of TrialSets")
        first = parts[0]
        for p in parts[1:]:
            if p.shape != first.shape:
                raise DimensionError(f"Cannot concatenate trial shapes {first.shape} and {p.shape}")
            if p.sample_rate_hz != first.sample_rate_hz:
                raise ValidationError("Cannot concatenate TrialSets with different sample rates")
        return TrialSet(
            signals=np.concatenate([p.signals for p in parts], axis=0),
            labels=np.concatenate([p.labels for p in parts]),
            users=np.concatenate([p.users for p in parts]),
            n_classes=max(p.n_classes for p in parts),
            n_users=max(p.n_users for p in parts),
            name=name or first.name,
            sample_rate_hz=first.sample_rate_hz,
        )

    @staticmethod
    def from_trials(trials: Sequence[Trial], n_classes: int, n_users: int, name: str = "trials") -> "TrialSet":
        if not trials:
            raise ValidationError("Cannot build a TrialSet from zero trials")
        return TrialSet(
            signals=np.stack([t.signal for t in trials]).astype(np.float32),
            labels=np.array([t.label for t in trials]),
            users=np.array([t.user for t in trials]),
            n_classes=n_classes,
            n_users=n_users,
            name=name,
            sample_rate_hz=trials[0].sample_rate_hz,
        )


@dataclass
class TrialSetManifest:
    """Sidecar metadata written next to a trial file"""
    name: str
    created_utc: str
    generator_spec: Optional[Dict[str, Any]] = None
    extra: Dict[str, Any] = field(default_factory=dict)


# Presets shaped after commonly used motor-imagery datasets, all at 128 Hz over 4 s
PRESETS: Dict[str, Dict[str, Any]] = {
    "desk": dict(c=8, t=512, K=4, U=7, trials_per_class_per_user=40),
    "bnci-like": dict(c=22, t=512, K=4, U=9, trials_per_class_per_user=144),
    "weibo-like": dict(c=64, t=512, K=6, U=10, trials_per_class_per_user=80),
    "bnci2014002-like": dict(c=15, t=512, K=2, U=14, trials_per_class_per_user=80),
}


class SynthSpec(BaseModel):
    """Parameters of the synthetic multi-user EEG generator"""
    c: int = Field(8, ge=1, description="Number of channels")
    t: int = Field(512, ge=2, description="Samples per trial")
    K: int = Field(4, ge=1, description="Number of task classes")
    U: int = Field(7, ge=1, description="Number of users")
    trials_per_class_per_user: int = Field(40, ge=1)
    sample_rate_hz: float = Field(128.0, gt=0)
    class_band_hz: Optional[List[Tuple[float, float]]] = Field(
        None, description="Per-class oscillation band; defaults to evenly spaced bands in 8-30 Hz")
    user_offset_scale: float = Field(0.6, ge=0, description="Strength of the per-user spatial mixing")
    user_pattern_scale: float = Field(0.5, ge=0, description="Amplitude of the per-user additive pattern")
    snr: float = Field(2.0, gt=0, description="Class-template to noise power ratio")
    seed: int = 0
    name: str = "synthetic"

    @model_validator(mode="after")
    def _check_bands(self) -> "SynthSpec":
        if self.class_band_hz is not None:
            if len(self.class_band_hz) != self.K:
                raise ValueError(f"class_band_hz needs {self.K} bands, got {len(self.class_band_hz)}")
            nyquist = self.sample_rate_hz / 2
            for lo, hi in self.class_band_hz:
                if not 0 < lo < hi < nyquist:
                    raise ValueError(f"Invalid class band ({lo}, {hi}) for sample rate {self.sample_rate_hz}")
        return self

    def bands(self) -> List[Tuple[float, float]]:
        if self.class_band_hz is not None:
            return [tuple(b) for b in self.class_band_hz]
        edges = np.linspace(8.0, 30.0, self.K + 1)
        return [(float(edges[k]), float(edges[k + 1])) for k in range(self.K)]

    @classmethod
    def preset(cls, name: str, **overrides) -> "SynthSpec":
        if name not in PRESETS:
            raise ValidationError(f"Unknown preset '{name}'; choose from {sorted(PRESETS)}")
        values = dict(PRESETS[name], name=name)
        values.update(overrides)
        return cls(**values)
