"""Counter-based random streams.

Each path owns a Philox key.  The ``p``-th standard normal of a path is a
deterministic function of ``(key, p)`` (inverse-CDF of the ``p``-th 64-bit
output), so any block of increments can be regenerated independently and the
result never depends on batching or thread scheduling.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_TWO_M53 = 2.0**-53


def derive_seed(base_seed: int, index: int) -> int:
    """64-bit seed for replication ``index`` of an ensemble keyed by ``base_seed``."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def raw_stream(seed: int, count: int, offset: int = 0) -> np.ndarray:
    bg = np.random.Philox(key=int(seed))
    block, skip = divmod(int(offset), 4)
    if block:
        bg.advance(block)
    raw = bg.random_raw(count + skip)
    return raw[skip:]


def uniforms(seed: int, count: int, offset: int = 0) -> np.ndarray:
    """Open-interval uniforms on (0, 1) at stream positions ``offset .. offset+count-1``."""
    raw = raw_stream(seed, count, offset)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53


def standard_normals(seed: int, count: int, offset: int = 0) -> np.ndarray:
    return ndtri(uniforms(seed, count, offset))


def brownian_increments(seed: int, n_obs: int, substeps: int, dt: float) -> np.ndarray:
    """Wiener increments of shape ``(n_obs, substeps)``; entry ``(j, s)`` sits at stream position ``j*substeps + s``."""
    return standard_normals(seed, n_obs * substeps).reshape(n_obs, substeps) * np.sqrt(dt)


def coarsen_increments(dW: np.ndarray, factor: int) -> np.ndarray:
    """Sum groups of ``factor`` consecutive substep increments (same Brownian path, coarser grid)."""
    n_obs, k = dW.shape
    if k % factor:
        raise ValueError(f"substeps {k} not divisible by {factor}")
    return dW.reshape(n_obs, k // factor, factor).sum(axis=-1)
