"""
Seed derivation for reproducible simulations.

All randomness flows from a handful of integer seeds in the experiment config.
Independent streams are derived by appending integer keys, so the stream a
client uses in a given round does not depend on scheduling order.
"""

import numpy as np

# Stream tags. Keep these stable: changing one changes every recorded result.
STREAM_PARTITION = 1
STREAM_INIT = 2
STREAM_TRAIN = 3
STREAM_NOISE = 4
STREAM_SUBSAMPLE = 5
STREAM_BLUR = 6
STREAM_TIEBREAK = 7
STREAM_SYNTHETIC = 8


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Return a Generator for the stream identified by (seed, *keys)."""
    entropy = [int(seed)] + [int(k) for k in keys]
    if any(value < 0 for value in entropy):
        raise ValueError(f'Seeds and stream keys must be non-negative, got {entropy}')
    return np.random.default_rng(entropy)
