"""Per-trajectory Gaussian streams.

Trajectory ``i`` of an ensemble with master seed ``s`` draws from
``numpy.random.SeedSequence(entropy=s, spawn_key=(i,))``. This is the same
derivation ``SeedSequence.spawn`` uses, so a trajectory's noise depends only
on ``(s, i)`` and never on how the ensemble was batched or scheduled.
"""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(ss))


def wiener_increments(master_seed: int, indices: Iterable[int] | int, n_steps: int, dt: float) -> np.ndarray:
    """Increments of shape ``(len(indices), n_steps)`` with variance ``dt``."""
    if isinstance(indices, (int, np.integer)):
        indices = range(int(indices))
    rows = [trajectory_rng(master_seed, i).standard_normal(n_steps) for i in indices]
    if not rows:
        return np.zeros((0, n_steps))
    return np.sqrt(dt) * np.vstack(rows)


def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments along the last axis."""
    n = increments.shape[-1]
    if n % factor:
        raise ValueError(f"{n} steps not divisible by {factor}")
    return increments.reshape(increments.shape[:-1] + (n // factor, factor)).sum(axis=-1)
