"""Keyed random streams.

Every consumer of randomness asks for a stream keyed by a tuple such as
``(seed, "task", task_id)`` or ``(seed, "client", round, device_id)``.
Streams are PCG64 generators seeded through ``numpy.random.SeedSequence``
with the key words as entropy, so a stream depends only on its key and never
on the order in which other streams were created or consumed. Gaussian draws
use numpy's ziggurat sampler (``Generator.standard_normal``).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_word(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        value = int(part)
        if value < 0:
            raise ValueError(f"stream key parts must be nonnegative, got {value}")
        return value
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"unsupported stream key part: {part!r}")


def stream(seed: int, *key) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``. Strings are hashed stably."""
    words = [_key_word(seed) & _MASK64] + [_key_word(k) for k in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
