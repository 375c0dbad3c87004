"""Sparse random projection with entries in {+sqrt(3), 0, -sqrt(3)}.

Entries are drawn i.i.d. with probabilities 1/6, 2/3, 1/6, so each has unit
variance and ``E ||R x||^2 = P ||x||^2``. No ``1/sqrt(P)`` rescaling is applied;
downstream standardization absorbs the scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import DTYPE, ParameterError, Rng, ShapeError, sample_categorical

SQRT3 = np.sqrt(3.0)
ENTRY_VALUES = np.array([SQRT3, 0.0, -SQRT3])
ENTRY_PROBS = (1 / 6, 2 / 3, 1 / 6)


@dataclass(frozen=True, eq=False)
class RandomProjection:
    matrix: np.ndarray  # (P, D), read-only
    source_dim: int
    target_dim: int
    seed: int
    stream: int = 0


def rp_new(rng: Rng, source_dim: int, target_dim: int) -> RandomProjection:
    if source_dim < 1 or target_dim < 1:
        raise ParameterError(f"projection dims must be positive, got D={source_dim}, P={target_dim}")
    idx = sample_categorical(rng, (target_dim, source_dim), ENTRY_PROBS)
    mat = ENTRY_VALUES[idx].astype(DTYPE)
    mat.setflags(write=False)
    return RandomProjection(mat, source_dim, target_dim, rng.seed, rng.stream)


def rp_from_seed(seed: int, stream: int, source_dim: int, target_dim: int) -> RandomProjection:
    return rp_new(Rng(seed, stream), source_dim, target_dim)


def rp_apply(proj: RandomProjection, x: np.ndarray) -> np.ndarray:
    """Project along the trailing axis: ``y = R x``."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != proj.source_dim:
        raise ShapeError(f"projection expects trailing dim {proj.source_dim}, got shape {x.shape}")
    return x @ proj.matrix.T
