"""Seeded random streams.

Every random draw in the simulator comes from a ``numpy.random.Generator``
backed by Philox, a counter-based bit generator whose output is fixed by its
key.  Independent sub-streams are derived from a master seed plus a tuple of
small integers (e.g. ``(run_seed, STREAM_CLIENT_TRAIN, client_id)``) through
``SeedSequence``, so adding a client never perturbs another client's draws.
"""

from __future__ import annotations

import numpy as np

# Sub-stream tags; the numeric values are part of the reproducibility contract.
STREAM_INIT = 0
STREAM_PARTITION = 1
STREAM_SPLIT = 2
STREAM_SYNTHETIC = 3
STREAM_SELECT = 4
STREAM_CLIENT_TRAIN = 5
STREAM_CLIENT_LATENCY = 6
STREAM_CLIENT_SPEED = 7


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a Philox generator keyed by ``seed`` and an optional sub-stream path."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed), *(int(s) for s in stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
