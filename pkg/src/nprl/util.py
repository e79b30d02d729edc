"""Deterministic seed derivation shared by every stochastic component.

Child seeds are pure functions of a master seed plus a path of string/int
parts, so independent stages (patients, folds, arms, probes) can be
generated in any order, or in parallel, with identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *parts: object) -> int:
    """Derive a child seed from ``seed`` and a path of identifying parts."""
    h = hashlib.sha256()
    h.update(str(int(seed)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(seed: int, *parts: object) -> np.random.Generator:
    """A fresh generator seeded by :func:`derive_seed`."""
    return np.random.default_rng(derive_seed(seed, *parts))
