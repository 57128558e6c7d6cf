"""Deterministic random number generation.

Every stochastic operation in the package draws from a Philox 4x64
counter-based generator keyed by a user seed plus a fixed stream id.
Counter-based generation makes outputs reproducible bit-for-bit across
platforms and independent of how many values other streams consumed.
"""

import numpy as np

# Stream ids keep independent pipeline stages from sharing a sequence.
STREAM_SURFACE_SAMPLING = 0
STREAM_VE_BOUNDARY = 1
STREAM_DOMAIN_SAMPLING = 2
STREAM_NET_INIT = 3
STREAM_TRAIN_BATCHES = 4
STREAM_EVAL = 5
STREAM_OCCLUSION = 6


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Generator for (seed, stream); identical arguments give identical output."""
    if seed < 0:
        raise ValueError("seed must be nonnegative")
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
