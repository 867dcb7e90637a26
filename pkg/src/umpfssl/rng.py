"""Seed lineage.

Every random draw in a simulation comes from a generator keyed by
``(master_seed, concern, *keys)``. Concerns (partition, sampling, dropout,
candidates, ...) get independent streams so that changing one knob does not
perturb the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _concern_id(concern: str) -> int:
    return zlib.crc32(concern.encode("utf-8"))


def seed_sequence(master: int, concern: str, *keys: int) -> np.random.SeedSequence:
    entropy = [int(master) & 0xFFFFFFFFFFFFFFFF, _concern_id(concern)]
    entropy.extend(int(k) for k in keys)
    if any(k < 0 for k in entropy):
        raise ValueError(f"seed keys must be non-negative, got {entropy}")
    return np.random.SeedSequence(entropy)


def make_rng(master: int, concern: str, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for one concern/key tuple."""
    return np.random.Generator(np.random.Philox(seed_sequence(master, concern, *keys)))


def derive_seed(master: int, concern: str, *keys: int) -> int:
    """A 63-bit integer seed, usable as the master of a nested lineage."""
    state = seed_sequence(master, concern, *keys).generate_state(2, np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])
