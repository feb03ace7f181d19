import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from macdiff import MacDiff, SkeletonScaler
from macdiff.sampling import to_model_frames
from macdiff.skeleton import OcclusionSpec, apply_occlusion, compute_stats, normalize


def small(**kw):
    base = dict(embed_dim=16, mlp_dim=32, heads=2, encoder_layers=1, decoder_layers=1, num_frames=8,
                batch_size=8, max_steps=6, sampling_steps=4)
    base.update(kw)
    return MacDiff.tiny(**base)


@pytest.fixture(scope="module")
def fitted(synth_small):
    X, _ = synth_small
    return small().fit(X)


def test_scaler_matches_stats(synth_small):
    X, _ = synth_small
    sc = SkeletonScaler().fit(X)
    np.testing.assert_allclose(sc.transform(X), normalize(X.astype(np.float32), compute_stats(X)), atol=1e-5)
    np.testing.assert_allclose(sc.inverse_transform(sc.transform(X)), X, atol=1e-4)
    with pytest.raises(NotFittedError):
        SkeletonScaler().transform(X)


def test_params_clone_round_trip():
    est = small(mask_ratio=0.75)
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin.mask_ratio == 0.75
    cfg = est.train_config(25)
    assert cfg.mask.ratio == 0.75 and cfg.model.embed_dim == 16 and cfg.max_steps == 6
    assert MacDiff.from_config(cfg).get_params()["mask_ratio"] == 0.75


def test_fit_transform_features(fitted, synth_small):
    X, _ = synth_small
    F = fitted.transform(X)
    assert F.shape == (len(X), 16) and np.all(np.isfinite(F))
    assert len(fitted.loss_curve_) == 6


def test_save_load_same_features(fitted, synth_small, tmp_path):
    X, _ = synth_small
    fitted.save(tmp_path / "ck")
    back = MacDiff.load(tmp_path / "ck")
    assert np.array_equal(back.transform(X), fitted.transform(X))


def test_sample_shapes_and_seed(fitted, synth_small):
    X, _ = synth_small
    a = fitted.sample(3, random_state=5)
    assert a.shape == (3, 8, 25, 3)
    assert np.array_equal(a, fitted.sample(3, random_state=5))
    c = fitted.sample(2, random_state=1, condition_from=X[:2])
    assert c.shape == (2, 8, 25, 3) and np.all(np.isfinite(c))
    with pytest.raises(ValueError):
        fitted.sample(3, condition_from=X[:2])


def test_inpaint_keeps_observed(fitted, synth_small):
    X, _ = synth_small
    Xm = to_model_frames(X[:3], 8)
    spec = OcclusionSpec("frames", (5, 3))
    occ = np.stack([apply_occlusion(x, spec)[0] for x in Xm])
    obs = spec.observed_mask(8, 25)
    out = fitted.inpaint(occ, obs, random_state=0)
    assert np.array_equal(out[:, obs], occ[:, obs])
    assert np.all(np.isfinite(out))
    with pytest.raises(ValueError):
        fitted.inpaint(occ, np.ones((5, 25), bool))


def test_augment_preserves_labels(fitted, synth_small):
    X, y = synth_small
    Xa, ya = fitted.augment(X, y, ratio=0.5, random_state=0)
    assert len(Xa) == len(X) + len(X) // 2
    assert Xa.shape[1] == 8
    assert np.array_equal(Xa[:len(X)], to_model_frames(X, 8)) and np.array_equal(ya[:len(X)], y)
    assert set(ya[len(X):]) <= set(y)


def test_validation_errors(fitted):
    with pytest.raises(NotFittedError):
        small().transform(np.zeros((1, 8, 25, 3)))
    with pytest.raises(ValueError, match="batch"):
        fitted.transform(np.zeros((8, 25, 3)))
    with pytest.raises(ValueError, match="joints"):
        fitted.transform(np.zeros((2, 8, 20, 3)))
    with pytest.raises(ValueError, match="NaN"):
        fitted.transform(np.full((2, 8, 25, 3), np.nan))
    with pytest.raises(ValueError):
        fitted.sample(1, random_state="seed")
