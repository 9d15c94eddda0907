"""
Named, reproducible random streams.

Every consumer (mask design, simulation, E-step draws, MCMC proposals)
gets its own Philox stream derived from the run seed and the stream name,
so adding a consumer never shifts another consumer's draws.
"""
import zlib
from typing import List

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_stream(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name),))
    return np.random.Generator(np.random.Philox(ss))


def spawn_streams(seed: int, name: str, count: int) -> List[np.random.Generator]:
    """``count`` independent substreams under one named stream (one per worker task)."""
    parent = np.random.SeedSequence(int(seed), spawn_key=(_name_key(name),))
    return [np.random.Generator(np.random.Philox(child)) for child in parent.spawn(int(count))]


def child_stream(rng: np.random.Generator, tag: int) -> np.random.Generator:
    """Deterministic child of an existing stream, keyed by an integer tag."""
    ss = np.random.SeedSequence(rng.integers(0, 2**63 - 1), spawn_key=(int(tag),))
    return np.random.Generator(np.random.Philox(ss))
