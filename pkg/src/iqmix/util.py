"""Shared plumbing: deterministic seed derivation and rounding."""

from __future__ import annotations

import hashlib
import math


def derive_seed(base: int, *parts: object) -> int:
    """Derive a child seed from a base seed plus context labels.

    blake2b over the repr of the full tuple, truncated to 63 bits, so every
    (stage, point, repeat, ...) combination gets an independent,
    version-stable seed from the one user-facing --seed value.
    """
    payload = repr((base, *parts)).encode("utf-8")
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def round_half_up(x: float) -> int:
    """Round to nearest integer with .5 going up (not banker's rounding)."""
    return math.floor(x + 0.5)
