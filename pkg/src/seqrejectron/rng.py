"""Seed handling.

All randomness comes from numpy's Philox counter-based generator. A master
seed is combined with a tuple of labels (strings or ints) through
``SeedSequence`` so every consumer gets its own stream: e.g. rollout ``i`` of
an evaluation uses ``substream(seed, "rollout", i)`` whether it runs serially
or in a worker process.
"""

from __future__ import annotations

import hashlib

import numpy as np

Label = str | int


def _label_words(label: Label) -> list[int]:
    if isinstance(label, (int, np.integer)):
        v = int(label)
        if v < 0:
            raise ValueError("integer stream labels must be nonnegative")
        return [1, v & 0xFFFFFFFF, (v >> 32) & 0xFFFFFFFF]
    digest = hashlib.sha256(str(label).encode()).digest()[:8]
    return [2] + [int.from_bytes(digest[i:i + 4], "little") for i in (0, 4)]


def seed_entropy(seed: int, *labels: Label) -> list[int]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    words = [seed & 0xFFFFFFFF, seed >> 32]
    for label in labels:
        words.extend(_label_words(label))
    return words


def substream(seed: int, *labels: Label) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *labels)``."""
    ss = np.random.SeedSequence(seed_entropy(seed, *labels))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *labels: Label) -> int:
    """A 63-bit integer seed for handing to another component."""
    ss = np.random.SeedSequence(seed_entropy(seed, *labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


def as_generator(rng: np.random.Generator | int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return substream(int(rng))


def draw_index(rng: np.random.Generator, row: np.ndarray) -> int:
    """Inverse-CDF draw from a probability row (one uniform per call)."""
    cdf = np.cumsum(row)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    # guard against landing on a trailing zero-mass entry through rounding
    last = int(np.flatnonzero(row > 0)[-1])
    return min(idx, last)


def draw_indices(rng: np.random.Generator, row: np.ndarray, size: int) -> np.ndarray:
    cdf = np.cumsum(row)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    last = int(np.flatnonzero(row > 0)[-1])
    return np.minimum(idx, last)
