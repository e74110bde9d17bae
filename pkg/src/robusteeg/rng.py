"""Seed derivation.

Every random stream is ``numpy.random.default_rng([root_seed, purpose, *extra])``
where ``purpose`` is the fixed integer below and ``extra`` carries indices such
as the fold number or batch number. Streams therefore never share state, so
changing how often one purpose draws (e.g. the attack) leaves the others
untouched.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 0,
    "shuffle": 1,
    "attack": 2,
    "dropout": 3,
    "weight_ascent": 4,
    "eval_attack": 5,
    "synth": 6,
    "fold": 7,
    "monitor": 8,
}


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), PURPOSES[purpose], *map(int, extra)])


def derive_seed(seed: int, purpose: str, *extra: int) -> int:
    return int(stream(seed, purpose, *extra).integers(0, 2**31 - 1))
