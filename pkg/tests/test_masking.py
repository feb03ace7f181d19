import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from macdiff.masking import Mask, MaskSpec, apply_mask, kept_count, make_mask, motion_intensity, unshuffle


def test_kept_count_examples():
    assert kept_count(0.9, 750) == 75
    assert kept_count(0.0, 750) == 750
    assert kept_count(0.75, 30) == math.ceil(0.25 * 30)


def test_ratio_zero_keeps_all(rng):
    m = make_mask(MaskSpec(ratio=0.0), 30, 25, rng)
    assert m.kept.all() and m.K == 750


def test_ratio_nine_tenths(rng):
    assert make_mask(MaskSpec(ratio=0.9), 30, 25, rng).K == 75


def test_spatiotemporal_quoted_counts(rng):
    spec = MaskSpec("spatiotemporal", keep_joints=8, keep_patches=10)
    for _ in range(50):
        m = make_mask(spec, 30, 25, rng)
        assert m.K == 80
        rows, cols = np.nonzero(m.kept)
        assert len(set(rows)) == 10 and len(set(cols)) == 8


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["random", "tube", "motion_aware"]), st.floats(0.0, 0.95), st.integers(1, 12),
       st.integers(1, 12), st.integers(0, 2**31))
def test_exact_kept_count(strategy, r, tp, v, seed):
    rng = np.random.default_rng(seed)
    k = kept_count(r, tp * v)
    motion = rng.random((tp, v))
    for t in (1, 3):
        spec = MaskSpec(strategy, r, tube_length=t)
        if k < 1:
            with pytest.raises(ValueError):
                make_mask(spec, tp, v, rng, motion)
            continue
        assert make_mask(spec, tp, v, rng, motion).K == k


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 0.9), st.integers(1, 10), st.integers(1, 6), st.integers(0, 2**31))
def test_temporal_masks_whole_patches(r, tp, v, seed):
    m = make_mask(MaskSpec("temporal", r), tp, v, np.random.default_rng(seed))
    rows = m.kept.all(axis=1) | (~m.kept).all(axis=1)
    assert rows.all()
    assert m.kept.all(axis=1).sum() == kept_count(r, tp)


def test_tube_masks_are_contiguous_runs(rng):
    m = make_mask(MaskSpec("tube", 0.5, tube_length=5), 30, 25, rng)
    starts = np.arange(0, 30, 5)
    for j in range(25):
        col = ~m.kept[:, j]
        for s in starts:
            seg = col[s:s + 5]
            if seg.any():
                first = np.argmax(seg)
                assert first == 0 and seg[: seg.sum()].all()


def test_keep_frequency_binomial_uniform():
    tp, v, n, r = 6, 5, 10_000, 0.5
    rng = np.random.default_rng(7)
    counts = np.zeros((tp, v))
    for _ in range(n):
        counts += make_mask(MaskSpec(ratio=r), tp, v, rng).kept
    p = kept_count(r, tp * v) / (tp * v)
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_motion_aware_prefers_motion(rng):
    motion = np.zeros((6, 5))
    motion[0] = 10.0
    freq = np.zeros((6, 5))
    for _ in range(500):
        freq += make_mask(MaskSpec("motion_aware", 0.8), 6, 5, rng, motion).kept
    assert freq[0].mean() > 5 * freq[1:].mean()
    with pytest.raises(ValueError):
        make_mask(MaskSpec("motion_aware"), 6, 5, rng)


def test_motion_intensity_oracle(rng):
    x = rng.normal(size=(8, 3, 3))
    g = x.reshape(2, 4, 3, 3).swapaxes(1, 2).reshape(2, 3, 12)
    got = motion_intensity(g, 4)
    for p in range(2):
        for v in range(3):
            frames = x[4 * p:4 * p + 4, v]
            assert np.isclose(got[p, v], np.abs(np.diff(frames, axis=0)).mean())


def test_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec("checkerboard")
    with pytest.raises(ValueError):
        MaskSpec(ratio=1.0)
    with pytest.raises(ValueError):
        make_mask(MaskSpec("spatiotemporal", keep_joints=30), 30, 25, np.random.default_rng())


def test_apply_mask_all_kept(rng):
    t = rng.normal(size=(3, 4, 5))
    assert np.array_equal(apply_mask(t, Mask.full(3, 4)), t.reshape(12, 5))


def test_apply_mask_single(rng):
    t = rng.normal(size=(3, 4, 5))
    m = Mask.from_indices([1 * 4 + 2], 3, 4)
    np.testing.assert_array_equal(apply_mask(t, m), t[1, 2][None])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_apply_mask_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(5, 6, 4))
    m = make_mask(MaskSpec(ratio=0.6), 5, 6, rng)
    rows = [t[p, v] for p in range(5) for v in range(6) if m.kept[p, v]]
    np.testing.assert_array_equal(apply_mask(t, m), np.stack(rows))
    tt = torch.from_numpy(t)
    assert torch.equal(apply_mask(tt, m), torch.from_numpy(np.stack(rows)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_unshuffle_inverse_and_fill(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=(2, 5, 6, 4))
    m = make_mask(MaskSpec(ratio=0.7), 5, 6, rng)
    fill = rng.normal(size=4)
    grid = unshuffle(apply_mask(t, m), m, fill)
    assert np.array_equal(grid[:, m.kept], t[:, m.kept])
    assert np.all(grid[:, ~m.kept] == fill)
    tg = unshuffle(apply_mask(torch.from_numpy(t), m), m, torch.from_numpy(fill))
    assert np.array_equal(tg.numpy(), grid)


def test_unshuffle_one_row():
    m = Mask.from_indices([3], 2, 3)
    grid = unshuffle(np.ones((1, 2)), m, np.zeros(2))
    assert np.count_nonzero(grid.any(axis=-1)) == 1 and grid[1, 0].tolist() == [1, 1]


def test_unshuffle_wrong_count():
    with pytest.raises(ValueError):
        unshuffle(np.ones((2, 2)), Mask.from_indices([3], 2, 3), np.zeros(2))
