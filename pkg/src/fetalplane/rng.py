"""Keyed random streams.

Every random draw in the engine comes from a generator keyed by
``(seed, purpose, *index)``, so a given sample, layer or step always sees the
same numbers no matter in which order the work is executed.
"""

from __future__ import annotations

import zlib

import numpy as np


def key_rng(seed: int, purpose: str, *index: int) -> np.random.Generator:
    tag = zlib.crc32(purpose.encode("utf-8"))
    entropy = [int(seed) & 0xFFFFFFFF, tag, *(int(i) & 0xFFFFFFFF for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
