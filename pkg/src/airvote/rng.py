"""Seeded random streams.

Every random draw in the simulator comes from a stream derived from one
master seed plus a purpose tag and integer ids (worker, round, subset, ...).
Streams are independent of call order, so results do not depend on how the
work is scheduled across threads.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *ids: int) -> np.random.Generator:
    """Return a fresh generator for ``(seed, tag, *ids)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    for i in ids:
        if int(i) < 0:
            raise ValueError(f"stream ids must be non-negative, got {ids}")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(_tag_key(tag), *map(int, ids)))
    return np.random.Generator(np.random.PCG64(seq))
