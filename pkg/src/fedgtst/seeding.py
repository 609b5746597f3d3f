"""Deterministic seed derivation.

Every random draw in the engine comes from a numpy Generator seeded through
`split_seed`. Streams are addressed by name (plus optional integer counters
appended to the name), so adding a new stream never perturbs the draws of any
existing one. The master seed is a plain integer supplied by the user.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["split_seed", "rng_for"]


def split_seed(master: int, label: str) -> int:
    """Derive a 63-bit child seed from (master, label).

    Counter-based: the label may embed counters, e.g. "client.7.round.42".
    The derivation is SHA-256 over the decimal master seed and the label,
    which is stable across platforms and numpy versions.
    """
    digest = hashlib.sha256(f"{master}|{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(master: int, label: str) -> np.random.Generator:
    """A fresh numpy Generator for the named stream."""
    return np.random.default_rng(split_seed(master, label))
