"""Counter-based seeded random streams.

Every stage draws from its own named substream so that re-running one stage
(say, ``augment``) never perturbs the randomness of another.  The mixing
function is stable across runs and platforms::

    key = SeedSequence([master_seed, crc32(name), *extra])

and the resulting 128-bit state keys a Philox generator.
"""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("env", "datagen", "vae", "augment", "agent", "eval")


def substream_key(master_seed: int, name: str, *extra: int) -> list[int]:
    return [int(master_seed), zlib.crc32(name.encode("utf-8")), *(int(e) for e in extra)]


def substream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    seq = np.random.SeedSequence(substream_key(master_seed, name, *extra))
    return np.random.Generator(np.random.Philox(seq))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 32-bit seed from ``rng`` (for recording provenance)."""
    return int(rng.integers(0, 2**32 - 1, dtype=np.uint64))
