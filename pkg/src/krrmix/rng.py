"""Portable random streams.

Every random draw in the harness comes from a Philox4x64 counter-based
generator keyed by (seed, step, purpose). Philox streams are stable across
platforms and numpy versions, and distinct keys give independent streams, so
data generation and weight init are reproducible bit-for-bit regardless of
scheduling: key = seed * 2^128 + purpose * 2^64 + step.
"""

from __future__ import annotations

import numpy as np

PURPOSE_INIT = 1
PURPOSE_TRAIN_DATA = 2
PURPOSE_EVAL_DATA = 3
PURPOSE_TEST = 4
PURPOSE_BENCH = 5


def stream(seed: int, step: int, purpose: int) -> np.random.Generator:
    """Independent generator for one (seed, step, purpose) triple."""
    if seed < 0 or step < 0 or purpose < 0:
        raise ValueError("seed, step and purpose must be nonnegative")
    key = (int(seed) << 128) + (int(purpose) << 64) + int(step)
    return np.random.Generator(np.random.Philox(key=key))
