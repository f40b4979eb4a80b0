"""Counter-based RNG derivation.

Every random decision in an experiment draws from a generator keyed by
(master seed, stream id, counters...), so runs are reproducible and the
stream for one purpose (say, client 7's shuffling in round 12) never shifts
when an unrelated part of the pipeline changes its number of draws.
"""

from __future__ import annotations

import numpy as np

DATA_STREAM = 1
PARTITION_STREAM = 2
INIT_STREAM = 3
SAMPLING_STREAM = 4
LOCAL_TRAIN_STREAM = 5
PROBE_STREAM = 6


def rng_for(seed: int, *key: int) -> np.random.Generator:
    entropy = (int(seed),) + tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy))
