"""Deterministic seed derivation"""
import hashlib
import json

SEED_BITS = 63


def derive_seed(*parts) -> int:
    """Hash an ordered tuple of JSON-serialisable parts into a non-negative 63-bit seed.

    The same parts always give the same seed, independent of process, platform and
    PYTHONHASHSEED, so every (fraction, repeat) cell can be reproduced on its own.
    """
    payload = json.dumps(list(parts), sort_keys=True, separators=(',', ':'), default=str)
    digest = hashlib.sha256(payload.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & ((1 << SEED_BITS) - 1)
