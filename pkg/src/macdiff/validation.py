"""Input validation shared by the estimators."""
from __future__ import annotations

import numbers
from typing import Optional

import numpy as np


def check_skeletons(X, frames: Optional[int] = None, joints: Optional[int] = None,
                    dtype=np.float32) -> np.ndarray:
    """Validate a batch of skeleton sequences of shape ``(n, T0, V, 3)``."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        raise ValueError("expected a batch (n, frames, joints, 3); wrap a single sequence with X[None]")
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected shape (n, frames, joints, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("empty batch of sequences")
    if joints is not None and X.shape[2] != joints:
        raise ValueError(f"expected {joints} joints, got {X.shape[2]}")
    if frames is not None and X.shape[1] < 2 and frames != X.shape[1]:
        raise ValueError("sequences need at least 2 frames to be resampled")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def check_observed_mask(mask, frames: int, joints: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (frames, joints):
        raise ValueError(f"observed mask must have shape {(frames, joints)}, got {mask.shape}")
    if not mask.any():
        raise ValueError("observed region is empty")
    return mask


def check_rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None or isinstance(random_state, numbers.Integral):
        return np.random.default_rng(random_state)
    raise ValueError(f"{random_state!r} cannot seed a numpy Generator")
