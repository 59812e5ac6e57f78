"""Seeded, counter-based random streams.

Every random draw in the package goes through :func:`make_rng`, which keys a
Philox generator by ``(seed, *stream)``.  Two streams with different keys are
independent, and the same key always reproduces the same draws, regardless of
the order in which streams are created.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"unsupported stream key {part!r}")


def make_rng(seed: int, *stream) -> np.random.Generator:
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = tuple(_key_part(p) for p in stream)
    seq = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))
