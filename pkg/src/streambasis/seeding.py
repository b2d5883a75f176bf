"""Deterministic RNG derivation.

Every random draw in the pipeline comes from a generator derived from
the run seed plus integer context tags, so any stage can be re-created
in isolation (workers, resumed runs) with identical streams.
"""

from __future__ import annotations

import numpy as np

TAG_PRETRAIN_INIT = 1
TAG_WINDOW_INIT = 2
TAG_TRAIN = 3
TAG_KMEANS = 4
TAG_BASIS_PAD = 5
TAG_EVAL_NEGATIVES = 6
TAG_EVAL_SAMPLE = 7
TAG_SYNTH = 8


def make_rng(*parts: int) -> np.random.Generator:
    """Build a generator from non-negative integer context parts."""
    for part in parts:
        if part < 0:
            raise ValueError(f"seed parts must be non-negative, got {parts}")
    return np.random.default_rng(parts)
