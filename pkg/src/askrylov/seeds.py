"""Reproducible random number streams.

All randomness flows through counter-based Philox generators so that runs are
reproducible across platforms and trial streams are independent by
construction. Gaussian variates come from numpy's ziggurat implementation of
`standard_normal` on top of the Philox uniform stream.
"""

from __future__ import annotations

import numpy as np

GAUSSIAN_METHOD = "philox4x64 + ziggurat standard_normal"


def generator(seed: int) -> np.random.Generator:
    """Philox generator keyed by a single seed."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def trial_generator(base_seed: int, trial_index: int) -> np.random.Generator:
    """Independent per-trial stream from a 128-bit (base_seed, trial) key."""
    key = np.array([np.uint64(base_seed), np.uint64(trial_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
