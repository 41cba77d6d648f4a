"""Counter-based random streams derived from one run seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def seed_sequence(seed: int, name: str, *index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _key(name), *[int(i) for i in index]])


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Independent Philox generator for subsystem ``name`` (e.g. "env", 3)."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, name, *index)))


def int_seed(seed: int, name: str, *index: int) -> int:
    """A 63-bit integer seed, for libraries that want a plain int."""
    return int(seed_sequence(seed, name, *index).generate_state(1, np.uint64)[0]) >> 1
