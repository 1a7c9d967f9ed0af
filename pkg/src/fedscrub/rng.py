"""Deterministic random-stream derivation.

Every random consumer in the package draws from a Generator derived from the
master seed plus an integer key path, so results never depend on scheduling
or on how many draws some other component made.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

# Stream tags. Keeping them distinct is what guarantees stream independence,
# so never reuse a tag for a new purpose.
INIT = 0
SELECT = 1
EPOCH = 2
FORGET = 3
DIFF_TRAIN = 4
DIFF_GENERATE = 5
SYNTH = 6
PARTITION = 7
HEADS = 8

SeedLike = Union[int, Sequence[int], np.random.Generator]


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator for the stream identified by an integer key path."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def as_rng(seed: SeedLike) -> np.random.Generator:
    """Accept an int, a key sequence, or a ready Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (list, tuple)):
        return derive_rng(*seed)
    return np.random.default_rng(int(seed))
