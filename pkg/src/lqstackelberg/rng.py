"""Counter-based random streams keyed by (seed, tag, indices)."""

from __future__ import annotations

import zlib

import numpy as np


def tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(master_seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Independent Philox stream for one work item.

    The stream depends only on its key, so item ``p`` draws the same numbers
    no matter how many other items exist or in which order they run.
    """
    seq = np.random.SeedSequence(
        int(master_seed), spawn_key=(tag_key(tag),) + tuple(int(i) for i in indices)
    )
    return np.random.Generator(np.random.Philox(seq))
