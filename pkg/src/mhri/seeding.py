"""Named, reproducible RNG streams."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """A generator that depends only on ``seed`` and the stream ``keys``."""
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)]))


def derive_seed(seed: int, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(0, 2**31 - 1))
