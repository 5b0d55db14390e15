"""Deterministic RNG streams.

Every random draw in the package flows from one integer seed plus a list of
string/int tags naming the consumer, so independent stages never share a
stream and two runs with the same seed are bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag: str | int) -> int:
    if isinstance(tag, int):
        return tag
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *tags: str | int) -> np.random.Generator:
    """Child generator for (seed, tags). Same arguments, same stream."""
    entropy = [int(seed)] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
