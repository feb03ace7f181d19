"""Token masks over the (Tp, V) patch grid.

Positions are always enumerated row-major (temporal patch first, then joint),
so flat index ``p * V + v`` addresses token ``(p, v)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

STRATEGIES = ("random", "temporal", "tube", "spatiotemporal", "motion_aware")


@dataclass
class MaskSpec:
    strategy: str = "random"
    ratio: float = 0.9
    tube_length: int = 5
    keep_joints: int = 8
    keep_patches: int = 10

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.strategy!r}")
        if not 0 <= self.ratio < 1:
            raise ValueError(f"mask ratio must lie in [0, 1), got {self.ratio}")
        if self.tube_length < 1:
            raise ValueError("tube_length must be >= 1")

    def validate(self, tp: int, v: int) -> None:
        if self.strategy == "spatiotemporal":
            if not 1 <= self.keep_joints <= v:
                raise ValueError(f"keep_joints={self.keep_joints} invalid for {v} joints")
            if not 1 <= self.keep_patches <= tp:
                raise ValueError(f"keep_patches={self.keep_patches} invalid for {tp} patches")

    def to_dict(self) -> dict:
        return asdict(self)


def kept_count(ratio: float, n: int) -> int:
    """``ceil((1 - r) * n)``, robust to binary rounding of ``r``."""
    return math.ceil((1.0 - ratio) * n - 1e-9)


@dataclass
class Mask:
    kept: np.ndarray

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=bool)
        if self.kept.ndim != 2:
            raise ValueError("mask grid must be 2-D (Tp, V)")
        self.kept_indices = np.flatnonzero(self.kept)

    @property
    def K(self) -> int:
        return int(self.kept_indices.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.kept.shape

    @classmethod
    def full(cls, tp: int, v: int) -> "Mask":
        return cls(np.ones((tp, v), dtype=bool))

    @classmethod
    def from_indices(cls, indices, tp: int, v: int) -> "Mask":
        kept = np.zeros(tp * v, dtype=bool)
        kept[np.asarray(indices, dtype=int)] = True
        return cls(kept.reshape(tp, v))


def motion_intensity(patches: np.ndarray, patch_length: int) -> np.ndarray:
    """Mean absolute frame-to-frame displacement inside each patch, shape (Tp, V)."""
    tp, v, d = patches.shape
    frames = patches.reshape(tp, v, patch_length, d // patch_length)
    if patch_length < 2:
        return np.zeros((tp, v))
    return np.abs(np.diff(frames, axis=2)).mean(axis=(2, 3))


def make_mask(spec: MaskSpec, tp: int, v: int, rng: np.random.Generator,
              motion: Optional[np.ndarray] = None) -> Mask:
    spec.validate(tp, v)
    n = tp * v
    k = kept_count(spec.ratio, n)

    if spec.strategy == "spatiotemporal":
        joints = rng.choice(v, spec.keep_joints, replace=False)
        patches = rng.choice(tp, spec.keep_patches, replace=False)
        kept = np.zeros((tp, v), dtype=bool)
        kept[np.ix_(patches, joints)] = True
        return Mask(kept)

    if k < 1:
        raise ValueError(f"mask ratio {spec.ratio} keeps no tokens on a {tp}x{v} grid")

    if spec.strategy == "random":
        return Mask.from_indices(rng.choice(n, k, replace=False), tp, v)

    if spec.strategy == "temporal":
        kp = kept_count(spec.ratio, tp)
        if kp < 1:
            raise ValueError(f"mask ratio {spec.ratio} keeps no temporal patches")
        kept = np.zeros((tp, v), dtype=bool)
        kept[rng.choice(tp, kp, replace=False)] = True
        return Mask(kept)

    if spec.strategy == "tube":
        to_mask = n - k
        kept = np.ones((tp, v), dtype=bool)
        starts = np.arange(0, tp, spec.tube_length)
        slots = [(s, j) for j in range(v) for s in starts]
        for idx in rng.permutation(len(slots)):
            if to_mask == 0:
                break
            s, j = slots[idx]
            length = min(spec.tube_length, tp - s, to_mask)
            kept[s:s + length, j] = False
            to_mask -= length
        return Mask(kept)

    # motion_aware: successive sampling proportional to softmax(intensity) via Gumbel top-k
    if motion is None:
        raise ValueError("motion_aware masking needs per-token motion intensity")
    motion = np.asarray(motion, dtype=np.float64).reshape(n)
    keys = motion + rng.gumbel(size=n)
    return Mask.from_indices(np.argsort(-keys, kind="stable")[:k], tp, v)


def _index(values, idx):
    try:
        import torch
        if isinstance(values, torch.Tensor):
            return torch.as_tensor(idx, dtype=torch.long, device=values.device)
    except ImportError:  # pragma: no cover
        pass
    return idx


def apply_mask(tokens, m: Mask):
    """Gather kept tokens: ``(..., Tp, V, C) -> (..., K, C)`` in row-major order."""
    *lead, tp, v, c = tokens.shape
    if (tp, v) != m.shape:
        raise ValueError(f"token grid {(tp, v)} does not match mask {m.shape}")
    return tokens.reshape(*lead, tp * v, c)[..., _index(tokens, m.kept_indices), :]


def unshuffle(values, m: Mask, fill):
    """Scatter ``(..., K, C)`` rows back onto the grid, filling masked slots with ``fill``."""
    *lead, k, c = values.shape
    if k != m.K:
        raise ValueError(f"got {k} rows for a mask keeping {m.K}")
    tp, v = m.shape
    try:
        import torch
        is_torch = isinstance(values, torch.Tensor)
    except ImportError:  # pragma: no cover
        is_torch = False
    if is_torch:
        fill = torch.as_tensor(fill, dtype=values.dtype, device=values.device)
        grid = fill.reshape(*fill.shape[:-1], 1, c).expand(*lead, tp * v, c).clone()
        grid[..., _index(values, m.kept_indices), :] = values
    else:
        fill = np.asarray(fill, dtype=values.dtype)
        grid = np.broadcast_to(fill[..., None, :], (*lead, tp * v, c)).copy()
        grid[..., m.kept_indices, :] = values
    return grid.reshape(*lead, tp, v, c)
