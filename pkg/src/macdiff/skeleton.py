"""Skeleton sequence data: statistics, resampling, patching, augmentation,
occlusion, synthetic data and on-disk formats.

Arrays follow the ``(..., frames, joints, 3)`` layout everywhere. Functions
are pure; randomness comes from an explicit :class:`numpy.random.Generator`.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

STD_FLOOR = 1e-6
UNLABELED = 0xFFFFFFFF
MAGIC = b"SKL1"
_HEADER = struct.Struct("<4sIII")

# NTU RGB+D 25-joint layout, zero-based indices.
BODY_PARTS: dict[str, tuple[int, ...]] = {
    "trunk": (0, 1, 2, 3, 20),
    "left_arm": (4, 5, 6, 7, 21, 22),
    "right_arm": (8, 9, 10, 11, 23, 24),
    "left_leg": (12, 13, 14, 15),
    "right_leg": (16, 17, 18, 19),
}

# Rough standing pose in meters (x lateral, y up, z forward), same joint order.
TEMPLATE_POSE = np.array(
    [
        [0.00, 0.95, 0.00], [0.00, 1.20, 0.00], [0.00, 1.50, 0.00], [0.00, 1.65, 0.00],
        [-0.18, 1.45, 0.00], [-0.22, 1.18, 0.00], [-0.24, 0.95, 0.00], [-0.25, 0.88, 0.00],
        [0.18, 1.45, 0.00], [0.22, 1.18, 0.00], [0.24, 0.95, 0.00], [0.25, 0.88, 0.00],
        [-0.10, 0.92, 0.00], [-0.11, 0.50, 0.00], [-0.12, 0.08, 0.00], [-0.12, 0.03, 0.10],
        [0.10, 0.92, 0.00], [0.11, 0.50, 0.00], [0.12, 0.08, 0.00], [0.12, 0.03, 0.10],
        [0.00, 1.45, 0.00], [-0.26, 0.82, 0.00], [-0.22, 0.87, 0.03],
        [0.26, 0.82, 0.00], [0.22, 0.87, 0.03],
    ]
)


class SkeletonFormatError(ValueError):
    """Base class for sequence-file problems."""


class BadMagicError(SkeletonFormatError):
    pass


class TruncatedFileError(SkeletonFormatError):
    pass


class NonFiniteDataError(SkeletonFormatError):
    pass


@dataclass
class SkeletonSequence:
    coords: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        self.coords = check_sequence(self.coords)

    @property
    def frames(self) -> int:
        return self.coords.shape[0]

    @property
    def joints(self) -> int:
        return self.coords.shape[1]


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def check_sequence(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (frames, joints, 3), got {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"{name} must have at least one frame and one joint")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def compute_stats(dataset) -> NormalizationStats:
    """Per-channel mean and (population) std over all frames, joints and sequences."""
    seqs = [dataset] if isinstance(dataset, np.ndarray) and dataset.ndim == 3 else list(dataset)
    if len(seqs) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    flat = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1, 3) for s in seqs])
    if flat.size == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    if not np.all(np.isfinite(flat)):
        raise ValueError("dataset contains non-finite values")
    return NormalizationStats(flat.mean(axis=0), np.maximum(flat.std(axis=0), STD_FLOOR))


def normalize(x, stats: NormalizationStats) -> np.ndarray:
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    out = (x - stats.mean) / stats.std
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


def denormalize(x0, stats: NormalizationStats) -> np.ndarray:
    x0 = np.asarray(x0)
    if not np.all(np.isfinite(x0)):
        raise ValueError("input contains non-finite values")
    out = x0 * stats.std + stats.mean
    return out.astype(x0.dtype) if np.issubdtype(x0.dtype, np.floating) else out


def resample_frames(x: np.ndarray, target_frames: int) -> np.ndarray:
    """Piecewise-linear resampling along the time axis (axis -3)."""
    n = x.shape[-3]
    if n < 2:
        raise ValueError("need at least 2 frames to interpolate")
    pos = np.linspace(0.0, n - 1, target_frames)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo).astype(x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    frac = frac[:, None, None]
    a = np.take(x, lo, axis=-3)
    b = np.take(x, hi, axis=-3)
    return a + frac * (b - a)


def crop_resize(x, target_frames: int, crop_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous crop of ``ceil(crop_ratio * T0)`` frames resampled to ``target_frames``."""
    x = check_sequence(x)
    if not 0 < crop_ratio <= 1:
        raise ValueError(f"crop_ratio must lie in (0, 1], got {crop_ratio}")
    n = x.shape[0]
    seg = math.ceil(crop_ratio * n - 1e-9)
    if seg < 2:
        raise ValueError(f"crop segment of {seg} frame(s) is too short to interpolate")
    start = int(rng.integers(0, n - seg + 1))
    return resample_frames(x[start:start + seg], target_frames)


def random_crop_resize(x, target_frames: int, ratio_range: tuple[float, float], rng: np.random.Generator):
    ratio = float(rng.uniform(*ratio_range)) if ratio_range[0] < ratio_range[1] else float(ratio_range[0])
    return crop_resize(x, target_frames, ratio, rng)


def patchify(x, patch_length: int):
    """``(..., T0, V, 3) -> (..., T0 // l, V, l * 3)``; works on numpy arrays and torch tensors."""
    *lead, t0, v, c = x.shape
    if t0 % patch_length:
        raise ValueError(f"{t0} frames are not divisible by patch length {patch_length}")
    tp = t0 // patch_length
    return x.reshape(*lead, tp, patch_length, v, c).swapaxes(-3, -2).reshape(*lead, tp, v, patch_length * c)


def unpatchify(g, patch_length: int):
    """Exact inverse of :func:`patchify`."""
    *lead, tp, v, d = g.shape
    if d % patch_length:
        raise ValueError(f"patch dim {d} is not a multiple of patch length {patch_length}")
    c = d // patch_length
    return g.reshape(*lead, tp, v, patch_length, c).swapaxes(-3, -2).reshape(*lead, tp * patch_length, v, c)


def rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def augment(x, rotation_max: float, noise_sigma: float, rng: np.random.Generator):
    """Return ``(encoder_view, clean_view)`` sharing one random rotation.

    Gaussian jitter is added to the encoder view only.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    x = np.asarray(x)
    angles = rng.uniform(-rotation_max, rotation_max, size=3) if rotation_max > 0 else np.zeros(3)
    if np.any(angles):
        clean = (x @ rotation_matrix(*angles).T).astype(x.dtype)
    else:
        clean = x.copy()
    if noise_sigma > 0:
        noisy = clean + rng.normal(0.0, noise_sigma, size=clean.shape).astype(clean.dtype)
    else:
        noisy = clean.copy()
    return noisy, clean


@dataclass
class OcclusionSpec:
    kind: str
    frame_range: tuple[int, int] = (0, 0)
    part: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("frames", "body_part"):
            raise ValueError(f"unknown occlusion kind {self.kind!r}")
        if self.kind == "body_part" and self.part not in BODY_PARTS:
            raise ValueError(f"unknown body part {self.part!r}; expected one of {sorted(BODY_PARTS)}")

    @classmethod
    def random(cls, kind: str, frames: int, rng: np.random.Generator, frame_fraction: float = 0.5):
        if kind == "frames":
            length = max(1, int(round(frame_fraction * frames)))
            start = int(rng.integers(0, frames - length + 1))
            return cls("frames", (start, length))
        parts = list(BODY_PARTS)
        return cls("body_part", part=parts[int(rng.integers(len(parts)))])

    def observed_mask(self, frames: int, joints: int) -> np.ndarray:
        mask = np.ones((frames, joints), dtype=bool)
        if self.kind == "frames":
            start, length = self.frame_range
            if start < 0 or length < 0 or (length > 0 and start + length > frames):
                raise ValueError(f"frame range {self.frame_range} outside [0, {frames})")
            mask[start:start + length] = False
        else:
            if joints != 25:
                raise ValueError("body-part occlusion requires the 25-joint layout")
            mask[:, list(BODY_PARTS[self.part])] = False
        return mask


def apply_occlusion(x, spec: OcclusionSpec):
    """Zero the occluded entries; return ``(x_occluded, observed_mask)`` with mask of shape (T0, V)."""
    x = check_sequence(x)
    mask = spec.observed_mask(*x.shape[:2])
    if not mask.any():
        raise ValueError("occlusion covers every entry")
    return np.where(mask[..., None], x, 0).astype(x.dtype), mask


def _class_motion(c: int, joints: int, rng: np.random.Generator, parts: list[tuple[int, ...]]):
    part = parts[c % len(parts)]
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset_dir = rng.normal(size=3)
    offset_dir /= np.linalg.norm(offset_dir)
    return {
        "joints": np.array(part),
        "direction": direction,
        "offset": offset_dir * rng.uniform(0.08, 0.15),
        "freq": 1.0 + 0.5 * (c // len(parts)) + rng.uniform(0.0, 1.5),
        "amp": rng.uniform(0.10, 0.20),
        "phase": rng.uniform(0, 2 * np.pi),
    }


def synth_dataset(n_classes: int = 4, n_per_class: int = 64, frames: int = 64, joints: int = 25, seed: int = 0):
    """Deterministic labeled toy actions: template pose plus a class-specific limb oscillation.

    Returns ``(X, y)`` with ``X`` of shape ``(n_classes * n_per_class, frames, joints, 3)`` float32.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    if joints == 25:
        template = TEMPLATE_POSE.copy()
        parts = list(BODY_PARTS.values())
        parts = [parts[i] for i in (1, 2, 3, 4, 0)]
    else:
        template = rng.normal(0.0, 0.3, size=(joints, 3))
        parts = [tuple(a.tolist()) for a in np.array_split(np.arange(joints), min(5, joints))]
    motions = [_class_motion(c, joints, rng, parts) for c in range(n_classes)]
    u = np.linspace(0.0, 1.0, frames)[:, None]
    X = np.empty((n_classes * n_per_class, frames, joints, 3), dtype=np.float32)
    y = np.repeat(np.arange(n_classes), n_per_class)
    for i, c in enumerate(y):
        m = motions[c]
        phase = m["phase"] + rng.uniform(-np.pi / 4, np.pi / 4)
        amp = m["amp"] * rng.uniform(0.85, 1.15)
        freq = m["freq"] * rng.uniform(0.9, 1.1)
        seq = np.broadcast_to(template, (frames, joints, 3)).copy()
        wave = amp * np.sin(2 * np.pi * freq * u + phase)
        seq[:, m["joints"]] += (wave * m["direction"])[:, None, :] + m["offset"]
        seq += rng.normal(0.0, 0.03, size=3)
        seq += rng.normal(0.0, 0.01, size=seq.shape)
        X[i] = seq
    return X, y


def save_sequence(x, path, label: Optional[int] = None) -> None:
    if isinstance(x, SkeletonSequence):
        x, label = x.coords, x.label if label is None else label
    x = check_sequence(x)
    t0, v, _ = x.shape
    header = _HEADER.pack(MAGIC, t0, v, UNLABELED if label is None else int(label))
    payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_sequence(path) -> SkeletonSequence:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an SKL1 sequence file")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, t0, v, label = _HEADER.unpack_from(data)
    expected = t0 * v * 3 * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} payload bytes for T0={t0}, V={v}, got {len(payload)}")
    coords = np.frombuffer(payload, dtype="<f4").reshape(t0, v, 3).astype(np.float32)
    if not np.all(np.isfinite(coords)):
        raise NonFiniteDataError(f"{path}: payload contains non-finite values")
    return SkeletonSequence(coords, None if label == UNLABELED else int(label))


@dataclass
class SkeletonDataset:
    """A directory of SKL1 files described by ``manifest.json``."""

    sequences: list[np.ndarray]
    labels: list[Optional[int]]
    splits: list[str]
    stats: Optional[NormalizationStats] = None
    files: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def subset(self, split: str):
        idx = [i for i, s in enumerate(self.splits) if s == split]
        X = np.stack([self.sequences[i] for i in idx]) if idx else np.empty((0,))
        y = np.array([-1 if self.labels[i] is None else self.labels[i] for i in idx])
        return X, y


def save_dataset(directory, X: Sequence[np.ndarray], y: Sequence[Optional[int]], splits: Sequence[str],
                 stats: Optional[NormalizationStats] = None, meta: Optional[dict] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if stats is None:
        stats = compute_stats([x for x, s in zip(X, splits) if s == "train"] or list(X))
    entries = []
    for i, (x, label, split) in enumerate(zip(X, y, splits)):
        name = f"{split}_{i:05d}.skl"
        save_sequence(x, directory / name, None if label is None or label < 0 else int(label))
        entries.append({"file": name, "split": split, "label": None if label is None or label < 0 else int(label)})
    manifest = {"format": "SKL1", "sequences": entries, "stats": stats.to_dict(), "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_dataset(directory) -> SkeletonDataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    seqs, labels, splits, files = [], [], [], []
    for e in manifest["sequences"]:
        s = load_sequence(directory / e["file"])
        seqs.append(s.coords)
        labels.append(s.label)
        splits.append(e.get("split", "train"))
        files.append(e["file"])
    stats = NormalizationStats.from_dict(manifest["stats"]) if manifest.get("stats") else None
    return SkeletonDataset(seqs, labels, splits, stats, files, manifest.get("meta", {}))

