"""Deterministic 64-bit seed derivation shared by every randomized stage.

Child seeds are ``blake2b(digest_size=8)`` over the '|'-joined string forms
of the parts, e.g. ``derive_seed(master, "defend", "lstm", "pgd", 0)``.
The scheme is stable across platforms and documented in the README so
parallel cells get independent, reproducible Philox streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    msg = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(msg, digest_size=8).digest(), "big")


def philox(*parts) -> np.random.Generator:
    """Counter-based generator keyed by the derived seed of ``parts``."""
    key = parts[0] if len(parts) == 1 else derive_seed(*parts)
    return np.random.Generator(np.random.Philox(key=key))
