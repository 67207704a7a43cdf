"""Deterministic RNG stream derivation.

Every stochastic component draws from a stream derived by hashing a tuple
of labels (master seed, round, client id, purpose). Streams are therefore
independent of scheduling order and identical across runs and platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np

_DOMAIN = b"fedtext-seed-v1"


def derive_seed(*parts: object) -> int:
    """Derive a 64-bit seed from an arbitrary tuple of labels.

    Parts are rendered with repr(), so ints, strings, and floats are all
    fine as long as callers pass the same types consistently.
    """
    h = hashlib.blake2b(digest_size=8, key=_DOMAIN)
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def derive_rng(*parts: object) -> np.random.Generator:
    """Independent numpy Generator for the given label tuple."""
    return np.random.default_rng(derive_seed(*parts))
