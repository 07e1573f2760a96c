"""Counter-based random streams keyed by ``(seed, stream path)``.

Each stream is a Philox generator whose 128-bit key is the seed plus a
64-bit digest of the stream path, so streams for different trials or heads
never share state and can be drawn in any order.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(*path) -> int:
    digest = hashlib.blake2b(repr(tuple(path)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``seed`` and a hashable ``path`` like ``("trial", 3)``."""
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    key = np.array([seed & _MASK64, stream_id(*path)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
