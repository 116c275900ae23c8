"""Deterministic named RNG substreams.

All randomness in a run flows from one root seed; each consumer (data, init,
gates, shuffle, ...) draws from its own named substream so phases can be
re-seeded independently without perturbing each other.
"""

import zlib

import numpy as np


def substream(root_seed: int, name: str) -> np.random.Generator:
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), tag]))
