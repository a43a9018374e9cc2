"""Deterministic seed derivation.

A master seed is split into per-task streams by feeding an explicit
counter path into ``numpy.random.SeedSequence``.  The split depends only
on the integers in the path, never on call order, so replicas can run in
any order (or in parallel) and still reproduce bit-identically.
"""

from __future__ import annotations

import zlib

import numpy as np


def _as_int(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf8"))
    return int(part)


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    """Seed sequence for the task identified by ``path`` under ``master_seed``."""
    entropy = (int(master_seed),) + tuple(_as_int(p) for p in path)
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *path) -> np.random.Generator:
    """Generator for the task identified by ``path`` under ``master_seed``."""
    return np.random.default_rng(seed_sequence(master_seed, *path))
