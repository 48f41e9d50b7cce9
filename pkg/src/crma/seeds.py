"""Named random substreams derived from a single base seed.

Every piece of randomness in a run flows from one base seed through a
named substream, so swapping one component (say, the batch shuffler)
cannot silently change another's draws. Streams are derived with
``numpy.random.SeedSequence([base_seed, stream_code, *extra])``, which is
stable across processes and numpy versions.
"""

from __future__ import annotations

import numpy as np

STREAM_CODES = {
    "init": 0,     # model weight initialization
    "data": 1,     # synthetic task generation
    "shuffle": 2,  # mini-batch shuffling
}


def stream_rng(base_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named substream of ``base_seed``."""
    return np.random.default_rng([int(base_seed), STREAM_CODES[name], *extra])


def stream_seed(base_seed: int, name: str, *extra: int) -> int:
    """Integer seed for the named substream, for APIs that take a seed."""
    seq = np.random.SeedSequence([int(base_seed), STREAM_CODES[name], *extra])
    return int(seq.generate_state(1, dtype=np.uint64)[0])
