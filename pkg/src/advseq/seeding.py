"""Deterministic RNG derivation.

All randomness in a run flows from one top-level integer seed. Components
derive child generators through ``child_rng(seed, *path)`` where ``path`` is a
stable tuple of small ints/strings naming the consumer, e.g.::

    child_rng(seed, "init")                  # parameter initialization
    child_rng(seed, "dropout")               # dropout masks during training
    child_rng(seed, "batch")                 # batch order shuffling
    child_rng(seed, "advgen", step, i)       # AdvGen for sentence i of a step
    child_rng(seed, "noise", fraction_idx)   # synthetic noise generation

Identical (seed, path) always yields an identical generator state.
"""

from __future__ import annotations

import zlib

import numpy as np


def _path_key(path: tuple) -> tuple[int, ...]:
    """Map a mixed path of ints/strings to a tuple of uint32 spawn keys."""
    key = []
    for part in path:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf-8")))
        elif isinstance(part, (int, np.integer)):
            key.append(int(part) & 0xFFFFFFFF)
        else:
            raise TypeError(f"rng path parts must be int or str, got {type(part)!r}")
    return tuple(key)


def child_rng(seed: int, *path) -> np.random.Generator:
    """Return a Generator deterministically derived from (seed, path)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_key(path))
    return np.random.default_rng(ss)
