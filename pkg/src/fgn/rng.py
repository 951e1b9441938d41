"""Named, splittable random streams.

A stream is identified by a master seed plus a path of keys (ints or
strings); the same path always yields the same generator, and distinct paths
are statistically independent (``SeedSequence`` spawn keys).
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(k) for k in path))


def stream(master_seed: int, *path) -> np.random.Generator:
    """Generator for the named stream ``master_seed/path...``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *path)))


def split(gen: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from ``gen``'s seed sequence."""
    return [np.random.Generator(np.random.PCG64(s)) for s in gen.bit_generator.seed_seq.spawn(n)]


def get_state(gen: np.random.Generator) -> dict:
    return gen.bit_generator.state


def set_state(gen: np.random.Generator, state: dict) -> np.random.Generator:
    gen.bit_generator.state = state
    return gen
