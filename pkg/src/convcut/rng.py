"""Seeded random streams and parameter initialisers.

All randomness goes through numpy's ``Generator`` on the PCG64 bit generator,
which is bit-reproducible across platforms for a given seed. Independent
streams (model init, data shuffling, augmentation) are derived from one seed
by tagging the seed sequence with a stream number.
"""

from __future__ import annotations

import numpy as np

INIT_STREAM = 0
TRAIN_STREAM = 1
DATA_STREAM = 2
CHECK_STREAM = 3


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64([int(seed) & (2**64 - 1), stream]))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(np.float32)
