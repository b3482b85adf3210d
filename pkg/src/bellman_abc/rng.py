"""Deterministic random substreams keyed by ``(seed, purpose, indices)``."""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "spawn_key"]


def spawn_key(tag: str, *indices: int) -> tuple[int, ...]:
    return (zlib.crc32(tag.encode("utf-8")), *(int(i) for i in indices))


def substream(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Independent generator for one purpose.

    The stream depends only on the master seed, the purpose tag and the
    integer indices, never on call order or thread scheduling.
    """
    seq = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=spawn_key(tag, *indices))
    return np.random.Generator(np.random.PCG64(seq))
