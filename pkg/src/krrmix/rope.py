"""Rotary positional encoding.

Pairs of adjacent feature channels (2j, 2j+1) are rotated by pos * theta_j
with theta_j = base^(-2j / d); position 0 is the identity and dot products of
rotated vectors depend on positions only through their difference.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .errors import OddHeadDim, ShapeMismatch

ROPE_BASE = 10000.0


def rope_tables(positions: np.ndarray, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (n_positions, head_dim // 2).

    Angles are computed in float64 and cast, so float32 runs see the same
    rounded tables on every platform.
    """
    if head_dim % 2 != 0:
        raise OddHeadDim(f"head_dim must be even, got {head_dim}")
    positions = np.asarray(positions, dtype=np.float64)
    j = np.arange(head_dim // 2, dtype=np.float64)
    theta = ROPE_BASE ** (-2.0 * j / head_dim)
    ang = positions[..., :, None] * theta
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_apply(x, positions=None):
    """Rotate the last axis of x (..., N, d) by its position angles.

    positions defaults to 0..N-1. Works on Nodes (differentiable) and on
    plain arrays alike.
    """
    value = x.value if isinstance(x, ag.Node) else np.asarray(x)
    n = value.shape[-2]
    if positions is None:
        positions = np.arange(n)
    positions = np.asarray(positions)
    if positions.shape[-1] != n:
        raise ShapeMismatch(f"positions length {positions.shape[-1]} != sequence {n}")
    cos, sin = rope_tables(positions, value.shape[-1], value.dtype)
    return ag.rope_rotate(x, cos, sin)
