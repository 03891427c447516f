"""Seeded random streams.

Every stream is a numpy `Generator` over the counter-based Philox bit
generator, keyed by a 64-bit value hashed from the run seed and a tuple of
purpose words. Streams are independent of the order in which they are
created.
"""

import zlib
from typing import Union

import numpy as np

Word = Union[int, str]


def _word_to_int(word: Word) -> int:
    if isinstance(word, str):
        return zlib.crc32(word.encode("utf-8"))
    if word < 0:
        raise ValueError(f"stream words must be non-negative, got {word}")
    return int(word)


def derive_seed(seed: int, *words: Word) -> int:
    """Derive a 64-bit seed for the stream named by `words`."""
    entropy = [int(seed) & 0xFFFFFFFF, int(seed) >> 32]
    entropy.extend(_word_to_int(w) for w in words)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def make_generator(seed: int, *words: Word) -> np.random.Generator:
    """Return a Philox-backed generator for the stream named by `words`."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *words)))
