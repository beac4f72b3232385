from __future__ import annotations

import json
import struct

import numpy as np
import pytest

from robust_bci.errors import (
    BadMagicError,
    FormatError,
    NonFinitePayloadError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from robust_bci.models.network import Checkpoint
from robust_bci.models.trial import SynthSpec
from robust_bci.services.alignment import apply_alignment, fit_alignment
from robust_bci.services.network import predict
from robust_bci.services.storage import (
    decode_checkpoint,
    decode_trialset,
    encode_checkpoint,
    encode_trialset,
    load_checkpoint,
    load_manifest,
    load_trialset,
    save_checkpoint,
    save_trialset,
)
from robust_bci.services.synthetic import generate_synthetic

HEADER_SIZE = struct.calcsize("<4sH5If")
PREFIX = struct.Struct("<4sHI")


def _five_trials():
    return generate_synthetic(SynthSpec(c=3, t=16, K=5, U=1, trials_per_class_per_user=1, seed=4, name="five"))


def _rewrite_header(raw: bytes, edit) -> bytes:
    magic, version, length = PREFIX.unpack_from(raw, 0)
    header = json.loads(raw[PREFIX.size:PREFIX.size + length])
    edit(header)
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREFIX.pack(magic, version, len(encoded)) + encoded + raw[PREFIX.size + length:]


# --- Trial files ---

def test_trialset_round_trip(tmp_path, small_set, small_spec):
    path = save_trialset(small_set, tmp_path / "small.eegt", generator_spec=small_spec, extra={"note": "fixture"})
    loaded = load_trialset(path)
    assert loaded.equals(small_set)
    manifest = load_manifest(path)
    assert manifest.name == "small"
    assert manifest.generator_spec["seed"] == small_spec.seed
    assert manifest.extra == {"note": "fixture"}


def test_header_layout():
    ts = _five_trials()
    raw = encode_trialset(ts)
    magic, version, n, c, t, k, u, rate = struct.unpack_from("<4sH5If", raw, 0)
    assert (magic, version, n, c, t, k, u, rate) == (b"EEGT", 1, 5, 3, 16, 5, 1, 128.0)
    assert len(raw) == HEADER_SIZE + 5 * (4 + 4 * 3 * 16)


def test_bad_magic():
    raw = b"XXXX" + encode_trialset(_five_trials())[4:]
    with pytest.raises(BadMagicError, match="EEGT"):
        decode_trialset(raw)


def test_truncated_trial_file():
    raw = encode_trialset(_five_trials())
    record = 4 + 4 * 3 * 16
    with pytest.raises(TruncatedFileError, match="only 4"):
        decode_trialset(raw[:-record])


def test_trailing_bytes_are_a_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        decode_trialset(encode_trialset(_five_trials()) + b"\x00" * 8)


def test_version_mismatch():
    raw = bytearray(encode_trialset(_five_trials()))
    struct.pack_into("<H", raw, 4, 2)
    with pytest.raises(VersionMismatchError):
        decode_trialset(bytes(raw))


def test_non_finite_payload():
    raw = bytearray(encode_trialset(_five_trials()))
    struct.pack_into("<f", raw, HEADER_SIZE + 4, float("nan"))
    with pytest.raises(NonFinitePayloadError):
        decode_trialset(bytes(raw))


@pytest.mark.parametrize("offset", [18, 22], ids=["K", "U"])
def test_zero_classes_or_users_is_a_format_error(offset):
    empty = bytearray(encode_trialset(_five_trials().subset([])))
    struct.pack_into("<I", empty, offset, 0)
    with pytest.raises(FormatError):
        decode_trialset(bytes(empty))


def test_format_errors_are_distinct():
    kinds = {BadMagicError, TruncatedFileError, ShapeMismatchError, VersionMismatchError, NonFinitePayloadError}
    assert len(kinds) == 5
    assert all(issubclass(kind, FormatError) for kind in kinds)


# --- Checkpoints ---

def test_checkpoint_save_load_save_is_byte_identical(tmp_path, tiny_params, tiny_cfg):
    first = save_checkpoint(tiny_params, tiny_cfg, tmp_path / "a.eegm")
    checkpoint = load_checkpoint(first)
    assert checkpoint.params.bit_equal(tiny_params)
    assert checkpoint.config == tiny_cfg
    assert checkpoint.alignment is None
    second = save_checkpoint(checkpoint.params, checkpoint.config, tmp_path / "b.eegm")
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_keeps_bn_flag(tiny_params, tiny_cfg):
    flagged = tiny_params.copy()
    flagged.bn_mode_override = "batch"
    decoded = decode_checkpoint(encode_checkpoint(Checkpoint(flagged, tiny_cfg)))
    assert decoded.params.bn_mode_override == "batch"


def test_tampered_tensor_shape(tiny_params, tiny_cfg):
    raw = encode_checkpoint(Checkpoint(tiny_params, tiny_cfg))

    def grow_bias(header):
        for entry in header["tensors"]:
            if entry["name"] == "dense.bias":
                entry["shape"] = [3]

    with pytest.raises(ShapeMismatchError):
        decode_checkpoint(_rewrite_header(raw, grow_bias))


@pytest.mark.parametrize("edit", [
    lambda header: header.pop("tensors"),
    lambda header: header.pop("bn"),
    lambda header: header["tensors"][0].pop("offset"),
    lambda header: header["tensors"][0].update(shape="wide"),
    lambda header: header["bn"]["bn1"].pop("momentum"),
    lambda header: header.update(alignment={"w": [[1.0]]}),
])
def test_malformed_checkpoint_header_is_a_format_error(tiny_params, tiny_cfg, edit):
    raw = encode_checkpoint(Checkpoint(tiny_params, tiny_cfg))
    with pytest.raises(FormatError):
        decode_checkpoint(_rewrite_header(raw, edit))


def test_unknown_bn_layer_is_a_shape_mismatch(tiny_params, tiny_cfg):
    raw = encode_checkpoint(Checkpoint(tiny_params, tiny_cfg))
    with pytest.raises(ShapeMismatchError):
        decode_checkpoint(_rewrite_header(raw, lambda header: header["bn"].update(bn9={"momentum": 0.1})))


def test_checkpoint_header_that_is_not_json(tiny_params, tiny_cfg):
    raw = encode_checkpoint(Checkpoint(tiny_params, tiny_cfg))
    _, _, length = PREFIX.unpack_from(raw, 0)
    garbled = raw[:PREFIX.size] + b"\xff" * length + raw[PREFIX.size + length:]
    with pytest.raises(FormatError):
        decode_checkpoint(garbled)


def test_truncated_checkpoint(tiny_params, tiny_cfg):
    raw = encode_checkpoint(Checkpoint(tiny_params, tiny_cfg))
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(raw[:-4])
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"EEGT" + raw[4:])


def test_checkpoint_with_alignment_is_self_contained(tmp_path, tiny_params, tiny_cfg, small_set):
    calibration = small_set.subset(range(12))
    state = fit_alignment(calibration)
    path = save_checkpoint(tiny_params, tiny_cfg, tmp_path / "aligned.eegm", alignment=state)

    restored = load_checkpoint(path)
    assert restored.alignment.w.data.tobytes() == state.w.data.tobytes()
    assert restored.alignment.n_trials_used == 12
    raw_trials = small_set.subset(range(12, 24))
    expected = predict(tiny_params, tiny_cfg, apply_alignment(state, raw_trials).signals)
    actual = predict(restored.params, restored.config, apply_alignment(restored.alignment, raw_trials).signals)
    assert np.array_equal(actual, expected)
