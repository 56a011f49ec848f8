"""Counter-based random streams.

Every source of randomness in the package is a named Philox stream derived
from (seed, *path). Streams with the same key always produce the same
sequence, independently of how many other streams were consumed before them,
so per-item work (scene generation, training steps, sampling jobs) is pure in
(seed, item index) and parallel schedules match serial ones bit for bit.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *path) -> int:
    """128-bit Philox key for a named stream."""
    tag = "/".join([str(int(seed))] + [str(p) for p in path])
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, *path) -> np.random.Generator:
    """Independent generator for (seed, *path)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


def normal32(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws as float32 (drawn in float64, then cast)."""
    return rng.standard_normal(size=shape).astype(np.float32)
