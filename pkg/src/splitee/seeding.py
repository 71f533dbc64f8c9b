"""Deterministic seed derivation for independent RNG streams.

Every stochastic site (head init, shuffling, augmentation, interleave
permutation) derives its own stream from the global seed plus a stable
string key, so results are independent of scheduling order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*keys) -> int:
    text = "/".join(str(k) for k in keys)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*keys))
