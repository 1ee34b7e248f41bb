"""Deterministic RNG streams.

All randomness in a run flows from a single root seed. Substreams are derived
from string labels via CRC32 so that e.g. data generation, parameter init and
batch shuffling are independent and individually reproducible, on any platform.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(*labels: str | int) -> tuple[int, ...]:
    """Map labels to a stable tuple of 32-bit ints (order-sensitive)."""
    key = []
    for label in labels:
        if isinstance(label, int):
            key.append(label & 0xFFFFFFFF)
        else:
            key.append(zlib.crc32(label.encode("utf-8")))
    return tuple(key)


def rng_for(seed: int, *labels: str | int) -> np.random.Generator:
    """A PCG64 generator for the given root seed and substream labels."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=stream_key(*labels))
    return np.random.Generator(np.random.PCG64(ss))


def seed_for(seed: int, *labels: str | int) -> int:
    """Derive a child integer seed (for APIs that take plain ints)."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=stream_key(*labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)
