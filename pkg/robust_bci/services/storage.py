"""On-disk formats: trial files (EEGT), model checkpoints (EEGM) and JSON sidecars"""
import datetime
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from robust_bci.errors import (
    BadMagicError,
    FormatError,
    NonFinitePayloadError,
    ShapeMismatchError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from robust_bci.models.network import (
    AlignmentState,
    BatchNormStats,
    Checkpoint,
    CheckpointHeader,
    ModelConfig,
    ModelParams,
)
from robust_bci.models.trial import SynthSpec, TrialSet, TrialSetManifest
from robust_bci.numerics.tensor import Tensor
from robust_bci.services.network import param_shapes
from robust_bci.utils.json_encoder import json_dumps

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

TRIAL_MAGIC = b"EEGT"
TRIAL_VERSION = 1
_TRIAL_HEADER = struct.Struct("<4sH5If")
_TRIAL_RECORD_PREFIX = struct.Struct("<HH")

CHECKPOINT_MAGIC = b"EEGM"
CHECKPOINT_VERSION = 1
_CHECKPOINT_PREFIX = struct.Struct("<4sHI")


def manifest_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_json(obj: Any, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json_dumps(obj, indent=2, sort_keys=True))
    return path


# --- Trial files ---

def encode_trialset(ts: TrialSet) -> bytes:
    n, c, t = ts.signals.shape
    parts = [_TRIAL_HEADER.pack(TRIAL_MAGIC, TRIAL_VERSION, n, c, t, ts.n_classes, ts.n_users,
                                ts.sample_rate_hz)]
    samples = ts.signals.astype("<f4", copy=False)
    for i in range(n):
        parts.append(_TRIAL_RECORD_PREFIX.pack(int(ts.labels[i]), int(ts.users[i])))
        parts.append(samples[i].tobytes(order="C"))
    return b"".join(parts)


def decode_trialset(raw: bytes, name: str = "trials") -> TrialSet:
    if len(raw) < _TRIAL_HEADER.size:
        raise TruncatedFileError(f"Trial file has {len(raw)} bytes, shorter than the {_TRIAL_HEADER.size}-byte header")
    magic, version, n, c, t, n_classes, n_users, rate = _TRIAL_HEADER.unpack_from(raw, 0)
    if magic != TRIAL_MAGIC:
        raise BadMagicError(f"Expected magic {TRIAL_MAGIC!r}, found {magic!r}")
    if version != TRIAL_VERSION:
        raise VersionMismatchError(f"Unsupported trial format version {version} (expected {TRIAL_VERSION})")

    record_size = _TRIAL_RECORD_PREFIX.size + 4 * c * t
    payload = memoryview(raw)[_TRIAL_HEADER.size:]
    expected = n * record_size
    if len(payload) < expected:
        complete = len(payload) // record_size if record_size else 0
        raise TruncatedFileError(f"Trial file declares {n} trials but only {complete} are complete")
    if len(payload) > expected:
        raise ShapeMismatchError(
            f"Trial payload has {len(payload) - expected} bytes beyond {n} trials of shape ({c}, {t})")

    records = np.frombuffer(payload, dtype=np.dtype([("label", "<u2"), ("user", "<u2"),
                                                      ("signal", "<f4", (c, t))]), count=n)
    signals = records["signal"].astype(np.float32)
    if not np.all(np.isfinite(signals)):
        raise NonFinitePayloadError("Trial payload contains NaN or Inf samples")
    labels = records["label"].astype(np.int64)
    users = records["user"].astype(np.int64)
    if n and (labels.min() < 1 or labels.max() > n_classes or users.min() < 1 or users.max() > n_users):
        raise FormatError(f"Label/user ids fall outside the declared K={n_classes}, U={n_users}")
    try:
        return TrialSet(signals=signals, labels=labels, users=users, n_classes=n_classes,
                        n_users=n_users, name=name, sample_rate_hz=float(rate))
    except ValidationError as e:
        raise FormatError(f"Trial file header is not valid: {e}") from e


def save_trialset(ts: TrialSet, path: PathLike, generator_spec: Optional[SynthSpec] = None,
                  extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write ``ts`` in the trial format plus a JSON manifest beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode_trialset(ts))
    except OSError as e:
        logger.error(f"Failed to write trial file {path}: {e}")
        raise
    manifest: Dict[str, Any] = {
        "name": ts.name,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if generator_spec is not None:
        manifest["generator_spec"] = generator_spec.model_dump()
    manifest.update(extra or {})
    save_json(manifest, manifest_path(path))
    logger.info(f"Saved {len(ts)} trials to {path}")
    return path


def load_manifest(path: PathLike) -> TrialSetManifest:
    data = json.loads(manifest_path(path).read_text())
    return TrialSetManifest(
        name=data.pop("name"),
        created_utc=data.pop("created_utc"),
        generator_spec=data.pop("generator_spec", None),
        extra=data,
    )


def load_trialset(path: PathLike) -> TrialSet:
    path = Path(path)
    name = path.stem
    if manifest_path(path).exists():
        name = load_manifest(path).name
    try:
        ts = decode_trialset(path.read_bytes(), name=name)
    except FormatError as e:
        logger.error(f"Rejected trial file {path}: {e}")
        raise
    logger.info(f"Loaded {len(ts)} trials from {path}")
    return ts


# --- Checkpoints ---

def _alignment_block(alignment: Optional[AlignmentState]) -> Optional[Dict[str, Any]]:
    if alignment is None:
        return None
    return {
        "r_bar": alignment.r_bar.data.astype(np.float64).tolist(),
        "w": alignment.w.data.astype(np.float64).tolist(),
        "n_trials_used": alignment.n_trials_used,
        "n_clamped": alignment.n_clamped,
    }


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    params = checkpoint.params
    arrays: Dict[str, np.ndarray] = {name: t.data for name, t in params.weights.items()}
    for layer, stats in params.bn_stats.items():
        arrays[f"{layer}.running_mean"] = stats.running_mean
        arrays[f"{layer}.running_var"] = stats.running_var

    directory, chunks, offset = [], [], 0
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f4")
        directory.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes

    header = {
        "config": checkpoint.config.model_dump(),
        "tensors": directory,
        "bn": {layer: {"momentum": stats.momentum} for layer, stats in sorted(params.bn_stats.items())},
        "bn_mode_override": params.bn_mode_override,
        "alignment": _alignment_block(checkpoint.alignment),
        "payload_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes \
        + b"".join(chunks)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _CHECKPOINT_PREFIX.size:
        raise TruncatedFileError("Checkpoint is shorter than its fixed prefix")
    magic, version, header_len = _CHECKPOINT_PREFIX.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"Expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"Unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    start = _CHECKPOINT_PREFIX.size
    if len(raw) < start + header_len:
        raise TruncatedFileError("Checkpoint header is truncated")
    try:
        header = CheckpointHeader.model_validate(json.loads(raw[start:start + header_len].decode("utf-8")))
    except (PydanticValidationError, ValueError) as e:
        raise FormatError(f"Checkpoint header is not valid: {e}") from e
    config = header.config

    payload = memoryview(raw)[start + header_len:]
    declared = sum(int(np.prod(entry.shape, dtype=np.int64)) * 4 for entry in header.tensors)
    if header.payload_bytes is not None and declared != header.payload_bytes:
        raise ShapeMismatchError("Checkpoint tensor directory disagrees with its declared payload size")
    if len(payload) < declared:
        raise TruncatedFileError(f"Checkpoint payload has {len(payload)} bytes, expected {declared}")
    if len(payload) > declared:
        raise ShapeMismatchError(f"Checkpoint payload has {len(payload) - declared} unexpected trailing bytes")

    arrays: Dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in header.tensors:
        shape = tuple(entry.shape)
        if any(d < 0 for d in shape):
            raise ShapeMismatchError(f"Tensor '{entry.name}' has negative dimensions {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        if entry.offset != expected_offset:
            raise ShapeMismatchError(f"Tensor '{entry.name}' has offset {entry.offset}, expected {expected_offset}")
        array = np.frombuffer(payload, dtype="<f4", count=count, offset=expected_offset).reshape(shape)
        if not np.all(np.isfinite(array)):
            raise NonFinitePayloadError(f"Tensor '{entry.name}' contains NaN or Inf")
        arrays[entry.name] = array.astype(np.float32)
        expected_offset += count * 4

    shapes = param_shapes(config)
    weights: Dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name not in arrays:
            raise ShapeMismatchError(f"Checkpoint is missing tensor '{name}'")
        if arrays[name].shape != shape:
            raise ShapeMismatchError(f"Tensor '{name}' has shape {arrays[name].shape}, config implies {shape}")
        weights[name] = Tensor.wrap(arrays[name])

    bn_stats: Dict[str, BatchNormStats] = {}
    for layer, meta in header.bn.items():
        if f"{layer}.gamma" not in shapes:
            raise ShapeMismatchError(f"Checkpoint lists running statistics for unknown layer '{layer}'")
        try:
            mean, var = arrays[f"{layer}.running_mean"], arrays[f"{layer}.running_var"]
        except KeyError as e:
            raise ShapeMismatchError(f"Checkpoint is missing running statistics for {layer}") from e
        if mean.shape != shapes[f"{layer}.gamma"] or var.shape != mean.shape:
            raise ShapeMismatchError(f"Running statistics of {layer} do not match the config")
        bn_stats[layer] = BatchNormStats(mean.copy(), var.copy(), meta.momentum)

    alignment = None
    block = header.alignment
    if block is not None:
        try:
            r_bar = np.asarray(block.r_bar, dtype=np.float64)
            w = np.asarray(block.w, dtype=np.float64)
        except ValueError as e:
            raise ShapeMismatchError(f"Alignment block is not a square matrix: {e}") from e
        if r_bar.shape != (config.c, config.c) or w.shape != (config.c, config.c):
            raise ShapeMismatchError(f"Alignment block shape {w.shape} does not match c={config.c}")
        if not (np.all(np.isfinite(r_bar)) and np.all(np.isfinite(w))):
            raise NonFinitePayloadError("Alignment block contains NaN or Inf")
        alignment = AlignmentState(Tensor.wrap(r_bar), Tensor.wrap(w), block.n_trials_used, block.n_clamped)

    params = ModelParams(weights=weights, bn_stats=bn_stats, bn_mode_override=header.bn_mode_override)
    return Checkpoint(params=params, config=config, alignment=alignment)


def save_checkpoint(params: ModelParams, config: ModelConfig, path: PathLike,
                    alignment: Optional[AlignmentState] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(Checkpoint(params, config, alignment)))
    logger.info(f"Saved checkpoint ({len(params.weights)} tensors) to {path}")
    return path


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        checkpoint = decode_checkpoint(path.read_bytes())
    except FormatError as e:
        logger.error(f"Rejected checkpoint {path}: {e}")
        raise
    logger.info(f"Loaded checkpoint from {path}")
    return checkpoint
