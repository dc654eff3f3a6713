"""Named random streams derived from one root seed.

Every source of randomness in a run draws from its own stream so that, e.g.,
changing the number of endpoints does not perturb the data order.

======== ===================================================
name     used for
======== ===================================================
init     endpoint initialization
data     per-epoch shuffling of the training set
coords   subspace coordinate sampling
pairs    endpoint (and sub-batch) pair sampling
noise    label-noise injection
corrupt  input corruption
eval     evaluation-time sampling (random ensembles, mixtures)
======== ===================================================
"""

import numpy as np

STREAMS = {
    "init": 1,
    "data": 2,
    "coords": 3,
    "pairs": 4,
    "noise": 5,
    "corrupt": 6,
    "eval": 7,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], *extra))
    return np.random.default_rng(ss)
