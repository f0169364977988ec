"""Named, deterministic RNG substreams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *tags: object) -> np.random.Generator:
    """Return the generator for the substream of ``seed`` named by ``tags``.

    Tags are mixed into the SeedSequence entropy, so streams with distinct
    names are statistically independent, stable across platforms, and
    independent of the order in which workloads are scheduled.
    """
    words = [np.uint32(seed & 0xFFFFFFFF), np.uint32((seed >> 32) & 0xFFFFFFFF)]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            value = int(tag)
            words.append(np.uint32(value & 0xFFFFFFFF))
            words.append(np.uint32((value >> 32) & 0xFFFFFFFF))
        else:
            words.append(np.uint32(zlib.crc32(str(tag).encode("utf-8"))))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
