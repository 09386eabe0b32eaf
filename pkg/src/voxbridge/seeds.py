"""Named deterministic random streams.

Every stochastic component draws from its own stream, derived from a global
seed plus a sequence of purpose tags. Streams are independent of worker
count and call order, so any pipeline stage can be re-run in isolation and
produce the same draws.
"""
from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream", "tag_to_int"]


def tag_to_int(tag) -> int:
    """Map a purpose tag to a stable non-negative integer.

    Non-negative ints pass through; everything else is hashed by its string
    form, so tags stay stable across processes and platforms.
    """
    if isinstance(tag, (int, np.integer)) and int(tag) >= 0:
        return int(tag)
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent Philox generator for (seed, tags).

    Distinct tag tuples give statistically independent streams (SeedSequence
    spawn keys); the same tuple always reproduces the same draws.
    """
    key = tuple(tag_to_int(t) for t in tags)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
