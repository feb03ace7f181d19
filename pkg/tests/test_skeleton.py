import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from macdiff.skeleton import (
    BODY_PARTS, STD_FLOOR, BadMagicError, NonFiniteDataError, NormalizationStats, OcclusionSpec,
    SkeletonSequence, TruncatedFileError, apply_occlusion, augment, compute_stats, crop_resize,
    denormalize, load_dataset, load_sequence, normalize, patchify, resample_frames, rotation_matrix,
    save_dataset, save_sequence, synth_dataset, unpatchify,
)

finite = st.floats(-10, 10, allow_nan=False, width=32)


def test_stats_constant_zero_applies_floor():
    s = compute_stats([np.zeros((5, 2, 3))])
    np.testing.assert_array_equal(s.mean, 0.0)
    np.testing.assert_array_equal(s.std, STD_FLOOR)


def test_stats_constant_value():
    s = compute_stats([np.full((4, 3, 3), 2.5)])
    np.testing.assert_allclose(s.mean, 2.5)


def test_stats_two_point_oracle():
    a = np.zeros((1, 1, 3))
    b = np.zeros((1, 1, 3))
    b[..., 0] = 2.0
    s = compute_stats([a, b])
    assert s.mean[0] == 1.0 and s.std[0] == 1.0


def test_stats_rejects_empty_and_nan():
    with pytest.raises(ValueError):
        compute_stats([])
    with pytest.raises(ValueError):
        compute_stats([np.full((2, 2, 3), np.nan)])


def test_normalize_examples():
    s = NormalizationStats(np.array([1.0, 2.0, 3.0]), np.ones(3))
    np.testing.assert_array_equal(normalize(np.broadcast_to(s.mean, (4, 2, 3)), s), 0.0)
    s2 = NormalizationStats(np.zeros(3), np.full(3, 2.0))
    assert normalize(np.full((1, 1, 3), 4.0), s2)[0, 0, 0] == 2.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 4, 3), elements=finite))
def test_normalize_round_trip(x):
    s = compute_stats([x])
    np.testing.assert_allclose(denormalize(normalize(x, s), s), x, atol=1e-6)


def test_stats_serialization(rng):
    s = compute_stats([rng.normal(size=(3, 4, 3))])
    t = NormalizationStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(s.mean, t.mean)
    np.testing.assert_array_equal(s.std, t.std)


def test_crop_resize_identity(rng):
    x = rng.normal(size=(40, 5, 3))
    np.testing.assert_array_equal(crop_resize(x, 40, 1.0, rng), x)


def test_crop_resize_length(rng):
    x = rng.normal(size=(300, 25, 3))
    assert crop_resize(x, 120, 0.7, rng).shape == (120, 25, 3)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 1.0), st.integers(2, 50), st.integers(0, 2**31))
def test_crop_resize_constant_sequence(ratio, target, seed):
    pose = np.random.default_rng(seed).normal(size=(25, 3))
    x = np.broadcast_to(pose, (60, 25, 3)).copy()
    out = crop_resize(x, target, ratio, np.random.default_rng(seed))
    assert np.array_equal(out, np.broadcast_to(pose, out.shape))


def test_resample_loop_oracle(rng):
    x = rng.normal(size=(7, 2, 3))
    out = resample_frames(x, 13)
    for i in range(13):
        pos = i * 6 / 12
        lo = int(np.floor(pos))
        hi = min(lo + 1, 6)
        expect = x[lo] + (pos - lo) * (x[hi] - x[lo])
        np.testing.assert_allclose(out[i], expect, atol=1e-12)


def test_patchify_shapes(rng):
    x = rng.normal(size=(120, 25, 3))
    assert patchify(x, 4).shape == (30, 25, 12)
    assert patchify(x, 1).shape == (120, 25, 3)


def test_patchify_layout(rng):
    x = rng.normal(size=(8, 3, 3))
    g = patchify(x, 4)
    for p, v in itertools.product(range(2), range(3)):
        np.testing.assert_array_equal(g[p, v], x[4 * p:4 * p + 4, v].reshape(-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_patchify_round_trip(tp, v, l, seed):
    x = np.random.default_rng(seed).normal(size=(2, tp * l, v, 3))
    assert np.array_equal(unpatchify(patchify(x, l), l), x)


def test_patchify_rejects_indivisible(rng):
    with pytest.raises(ValueError):
        patchify(rng.normal(size=(10, 2, 3)), 4)


def test_augment_identity(rng):
    x = rng.normal(size=(6, 25, 3)).astype(np.float32)
    noisy, clean = augment(x, 0.0, 0.0, rng)
    assert np.array_equal(noisy, x) and np.array_equal(clean, x)


def test_augment_noise_variance():
    rng = np.random.default_rng(0)
    x = np.zeros((20, 25, 3))
    sigma = 0.005
    msd = []
    for _ in range(10_000 // 20):
        noisy, clean = augment(x, np.pi / 6, sigma, rng)
        msd.append(np.sum((noisy - clean) ** 2, axis=-1).ravel())
    msd = np.concatenate(msd)
    assert len(msd) >= 10_000
    assert abs(msd.mean() / (3 * sigma**2) - 1) < 0.2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_rotation_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 25, 3))
    _, clean = augment(x, np.pi, 0.0, rng)
    d0 = np.linalg.norm(x[:, :, None] - x[:, None], axis=-1)
    d1 = np.linalg.norm(clean[:, :, None] - clean[:, None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-5)


def test_rotation_matrix_orthonormal():
    r = rotation_matrix(0.3, -0.2, 1.1)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(r), 1.0)


def test_body_parts_partition_25_joints():
    joints = sorted(j for p in BODY_PARTS.values() for j in p)
    assert joints == list(range(25))


def test_occlusion_zero_frames(rng):
    x = rng.normal(size=(30, 25, 3))
    out, mask = apply_occlusion(x, OcclusionSpec("frames", (5, 0)))
    assert np.array_equal(out, x) and mask.all()


def test_occlusion_left_leg_count(rng):
    x = rng.normal(size=(30, 25, 3))
    out, mask = apply_occlusion(x, OcclusionSpec("body_part", part="left_leg"))
    assert (~mask).sum() == len(BODY_PARTS["left_leg"]) * 30
    assert np.all(out[~mask] == 0)


def test_occlusion_frame_range(rng):
    x = rng.normal(size=(30, 25, 3))
    _, mask = apply_occlusion(x, OcclusionSpec("frames", (10, 10)))
    expect = np.ones((30, 25), dtype=bool)
    expect[10:20] = False
    assert np.array_equal(mask, expect)


def test_occlusion_errors(rng):
    with pytest.raises(ValueError):
        OcclusionSpec("body_part", part="tail")
    with pytest.raises(ValueError):
        apply_occlusion(rng.normal(size=(10, 25, 3)), OcclusionSpec("frames", (0, 10)))
    with pytest.raises(ValueError):
        apply_occlusion(rng.normal(size=(10, 25, 3)), OcclusionSpec("frames", (5, 10)))


def test_synth_deterministic_and_balanced():
    X1, y1 = synth_dataset(4, 64, seed=5)
    X2, y2 = synth_dataset(4, 64, seed=5)
    assert X1.shape == (256, 64, 25, 3)
    assert np.array_equal(X1, X2) and np.array_equal(y1, y2)
    assert np.all(np.bincount(y1) == 64)


def test_synth_nearest_centroid_oracle():
    X, y = synth_dataset(4, 64, seed=0)
    tr = np.concatenate([np.flatnonzero(y == c)[:32] for c in range(4)])
    te = np.setdiff1d(np.arange(len(y)), tr)
    F = X.reshape(len(X), -1)
    cents = np.stack([F[tr][y[tr] == c].mean(0) for c in range(4)])
    pred = np.argmin(((F[te][:, None] - cents[None]) ** 2).sum(-1), axis=1)
    assert np.mean(pred == y[te]) > 0.9


def test_sequence_round_trip(tmp_path, rng):
    x = rng.normal(size=(120, 25, 3)).astype(np.float32)
    save_sequence(x, tmp_path / "a.skl", label=3)
    s = load_sequence(tmp_path / "a.skl")
    assert s.label == 3 and s.coords.dtype == np.float32
    assert s.coords.tobytes() == x.tobytes()
    save_sequence(SkeletonSequence(x), tmp_path / "b.skl")
    assert load_sequence(tmp_path / "b.skl").label is None


def test_sequence_truncated_and_magic(tmp_path, rng):
    path = tmp_path / "a.skl"
    save_sequence(rng.normal(size=(120, 25, 3)), path)
    data = path.read_bytes()
    assert len(data) == 16 + 120 * 25 * 3 * 4
    path.write_bytes(data[:-4])
    with pytest.raises(TruncatedFileError):
        load_sequence(path)
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        load_sequence(path)
    path.write_bytes(data[:10])
    with pytest.raises(TruncatedFileError):
        load_sequence(path)


def test_sequence_non_finite_payload(tmp_path):
    header = struct.pack("<4sIII", b"SKL1", 1, 1, 0)
    (tmp_path / "n.skl").write_bytes(header + np.array([np.nan, 0, 0], dtype="<f4").tobytes())
    with pytest.raises(NonFiniteDataError):
        load_sequence(tmp_path / "n.skl")


def test_dataset_round_trip(tmp_path, synth_small):
    X, y = synth_small
    splits = ["train" if i % 2 else "test" for i in range(len(X))]
    save_dataset(tmp_path / "d", list(X), y.tolist(), splits, meta={"classes": [0, 1, 2, 3]})
    d = load_dataset(tmp_path / "d")
    Xt, yt = d.subset("train")
    assert np.array_equal(Xt, X[1::2]) and np.array_equal(yt, y[1::2])
    assert d.meta["classes"] == [0, 1, 2, 3]
    np.testing.assert_allclose(d.stats.mean, compute_stats(X[1::2]).mean)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
