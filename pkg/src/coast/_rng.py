"""Labeled random streams.

A master seed fans out to independent streams by hashing a text label into the
seed sequence, so adding a stage never shifts the draws of another stage.
"""

from __future__ import annotations

import hashlib

import numpy as np


def label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, label: str) -> np.random.Generator:
    """Return the generator for ``(seed, label)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), label_key(label)])))


def derive_seed(seed: int, label: str) -> int:
    """Child integer seed, for APIs that take ints rather than generators."""
    ss = np.random.SeedSequence([int(seed), label_key(label)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
