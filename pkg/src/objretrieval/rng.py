"""Seed derivation.  Every random stream is a Philox generator keyed by a stable hash."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *names: object) -> int:
    """Stable 64-bit sub-seed for ``(seed, *names)``; independent of PYTHONHASHSEED."""
    payload = repr((int(seed),) + tuple(str(n) for n in names)).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def make_rng(seed: int, *names: object) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(derive_seed(seed, *names)))
