"""Deterministic random-stream derivation.

Every random decision in the package flows from one integer seed through
named substreams, so results do not depend on call order, thread count,
or process-level hash randomization.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(part: int | str) -> int:
    if isinstance(part, bool):  # bool is an int subclass; reject to avoid surprises
        raise TypeError("substream key parts must be int or str, not bool")
    if isinstance(part, int):
        return part & 0xFFFFFFFFFFFFFFFF
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")
    raise TypeError(f"substream key parts must be int or str, got {type(part)!r}")


def substream(seed: int, *key: int | str) -> np.random.Generator:
    """Generator for the substream of `seed` named by `key` parts."""
    entropy = (int(seed) & 0xFFFFFFFFFFFFFFFF,) + tuple(_key_to_int(p) for p in key)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def child_seed(seed: int, *key: int | str) -> int:
    """64-bit integer seed for the substream of `seed` named by `key`.

    Use when a component wants a plain integer seed of its own rather
    than a Generator.
    """
    entropy = (int(seed) & 0xFFFFFFFFFFFFFFFF,) + tuple(_key_to_int(p) for p in key)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 32 | int(state[1])
