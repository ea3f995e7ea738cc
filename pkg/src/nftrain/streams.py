"""Deterministic named RNG substreams.

Every stochastic component draws from a stream addressed by a base seed plus
an integer path, e.g. ``substream(seed, EPOCH_NOISE, epoch, batch)``.  Streams
with different paths are statistically independent, and the same
(seed, path) always reproduces the same draws, so reordering unrelated work
cannot silently change any draw.
"""

import numpy as np

# Path tags for the independent stream families used across the package.
INIT = 0
SHUFFLE = 1
TRAIN_NOISE = 2
EVAL_NOISE = 3
DATA = 4


def substream(seed: int, *path: int) -> np.random.Generator:
    """Generator for the substream at ``path`` under ``seed``.

    Reproducible: identical (seed, path) gives an identical generator state.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.default_rng(ss)
