"""Named random streams derived deterministically from one master seed.

Every source of randomness in the pipeline (splits, init, shuffling,
augmentation, per-tree forests) draws from its own labelled stream, so
changing how one stage consumes randomness never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_sequence(master: int, *labels: str | int) -> np.random.SeedSequence:
    """Build a SeedSequence from the master seed and a path of labels."""
    words: list[int] = [master & 0xFFFFFFFFFFFFFFFF]
    for label in labels:
        if isinstance(label, int):
            words.append(label & 0xFFFFFFFFFFFFFFFF)
        else:
            digest = hashlib.sha256(label.encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    return np.random.SeedSequence(words)


def stream(master: int, *labels: str | int) -> np.random.Generator:
    """A PCG64 generator for the given (master, labels...) path."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *labels)))
