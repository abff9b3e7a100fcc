"""Keyed, platform-stable random streams.

Every stochastic decision in the engine draws from a generator keyed by the
tuple of things it depends on, so calls are order-independent and replayable.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    """Hash an arbitrary key tuple to a 64-bit seed."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def keyed_rng(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def as_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
