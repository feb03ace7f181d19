"""scikit-learn style front end: ``MacDiff().fit(X).transform(X)``."""
from __future__ import annotations

import copy
import dataclasses
import math
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import DiffusionConfig, InpaintConfig, SamplerConfig, TrainConfig
from .evaluation import extract_features
from .masking import MaskSpec
from .model import ConditionTokens, ModelConfig
from .sampling import build_augmented_set, inpaint, precompute_conditions, sample, to_model_frames
from .skeleton import compute_stats, denormalize, normalize
from .training import TrainState, load_state, run_training, save_state
from .validation import check_observed_mask, check_rng, check_skeletons


class SkeletonScaler(TransformerMixin, BaseEstimator):
    """Per-coordinate-channel standardization of ``(n, T0, V, 3)`` batches."""

    def fit(self, X, y=None):
        X = check_skeletons(X, dtype=np.float64)
        self.stats_ = compute_stats(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return normalize(check_skeletons(X), self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return denormalize(np.asarray(X), self.stats_)


class MacDiff(TransformerMixin, BaseEstimator):
    """Masked conditional diffusion pre-training over skeleton sequences.

    ``fit`` pre-trains the encoder and decoder jointly, ``transform`` returns
    pooled encoder features, and the fitted decoder backs :meth:`sample`,
    :meth:`inpaint` and :meth:`augment`.
    """

    def __init__(self, embed_dim=256, mlp_dim=1024, heads=8, encoder_layers=8, decoder_layers=5,
                 patch_length=4, num_frames=120, condition_dropout=0.1,
                 mask_strategy="random", mask_ratio=0.9, tube_length=5, keep_joints=8, keep_patches=10,
                 schedule="inverse_cosine", tau=None, timesteps=1000,
                 epochs=500, batch_size=128, lr_start=1e-3, lr_end=1e-5, weight_decay=0.05, max_steps=None,
                 crop_ratio=(0.5, 1.0), rotation_max=math.pi / 6, noise_sigma=0.005,
                 sampling_steps=50, clip_x0=5.0, random_state=0):
        self.embed_dim = embed_dim
        self.mlp_dim = mlp_dim
        self.heads = heads
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.patch_length = patch_length
        self.num_frames = num_frames
        self.condition_dropout = condition_dropout
        self.mask_strategy = mask_strategy
        self.mask_ratio = mask_ratio
        self.tube_length = tube_length
        self.keep_joints = keep_joints
        self.keep_patches = keep_patches
        self.schedule = schedule
        self.tau = tau
        self.timesteps = timesteps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.weight_decay = weight_decay
        self.max_steps = max_steps
        self.crop_ratio = crop_ratio
        self.rotation_max = rotation_max
        self.noise_sigma = noise_sigma
        self.sampling_steps = sampling_steps
        self.clip_x0 = clip_x0
        self.random_state = random_state

    @classmethod
    def tiny(cls, **params) -> "MacDiff":
        base = dict(embed_dim=32, mlp_dim=64, heads=4, encoder_layers=2, decoder_layers=2, num_frames=32,
                    batch_size=32, epochs=40)
        base.update(params)
        return cls(**base)

    def train_config(self, num_joints: int = 25) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr_start=self.lr_start, lr_end=self.lr_end,
            weight_decay=self.weight_decay, seed=self.random_state, max_steps=self.max_steps,
            crop_ratio=tuple(self.crop_ratio), rotation_max=self.rotation_max, noise_sigma=self.noise_sigma,
            mask=MaskSpec(self.mask_strategy, self.mask_ratio, self.tube_length, self.keep_joints,
                          self.keep_patches),
            diffusion=DiffusionConfig(self.timesteps, self.schedule, self.tau),
            model=ModelConfig(self.embed_dim, self.mlp_dim, self.heads, self.encoder_layers, self.decoder_layers,
                              self.patch_length, self.num_frames, num_joints, self.condition_dropout),
        )

    def fit(self, X, y=None, out_dir=None):
        X = check_skeletons(X)
        self.stats_ = compute_stats(X)
        config = self.train_config(X.shape[2])
        state = run_training(X, config, self.stats_, out_dir=out_dir)
        self._set_state(state)
        return self

    def _set_state(self, state: TrainState):
        self.train_state_ = state
        self.model_ = state.model.eval()
        self.stats_ = state.stats
        self.schedule_ = state.schedule
        self.loss_curve_ = list(state.losses)
        self.n_features_out_ = state.model.config.embed_dim

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_skeletons(X, joints=self.model_.config.num_joints)
        return extract_features(self.model_, X, self.stats_).features

    def fit_reconstruction(self, X, epochs: Optional[int] = None, max_steps: Optional[int] = None):
        """Fine-tune a copy of the decoder on global-only conditions with the encoder frozen."""
        check_is_fitted(self, "model_")
        X = check_skeletons(X, joints=self.model_.config.num_joints)
        config = dataclasses.replace(self.train_state_.config, condition_mode="global_only",
                                     freeze_encoder=True, epochs=epochs if epochs is not None else self.epochs,
                                     max_steps=max_steps, noise_sigma=0.0)
        model = copy.deepcopy(self.model_).train()
        state = run_training(X, config, self.stats_, model=model)
        self.reconstruction_model_ = state.model.eval()
        return self

    def sample(self, n: int, random_state=None, condition_from=None):
        """Generate ``n`` sequences; unconditional unless ``condition_from`` sequences are given."""
        check_is_fitted(self, "model_")
        rng = check_rng(self.random_state if random_state is None else random_state)
        cond, mode = None, "unconditional"
        if condition_from is not None:
            Xc = check_skeletons(condition_from, joints=self.model_.config.num_joints)
            if len(Xc) != n:
                raise ValueError("condition_from must hold exactly n sequences")
            cond = self._conditions(Xc, rng)
            mode = "conditional"
        sampler = SamplerConfig(self.sampling_steps, mode=mode, clip_x0=self.clip_x0)
        return sample(n, self.model_, self.schedule_, sampler, cond, rng, self.stats_)

    def _conditions(self, X, rng):
        return ConditionTokens(precompute_conditions(self.model_, X, self.stats_, None, rng), "assembled")

    def inpaint(self, X, observed_mask, random_state=None, resample_count: int = 1):
        """Reconstruct the unobserved ``(frame, joint)`` entries of ``X`` (``observed_mask`` is (T0, V))."""
        check_is_fitted(self, "model_")
        model = getattr(self, "reconstruction_model_", self.model_)
        mc = model.config
        X = to_model_frames(check_skeletons(X, joints=mc.num_joints), mc.num_frames)
        mask = check_observed_mask(observed_mask, mc.num_frames, mc.num_joints)
        rng = check_rng(self.random_state if random_state is None else random_state)
        cfg = InpaintConfig(self.sampling_steps, resample_count, self.clip_x0)
        return inpaint(X, mask, model, self.schedule_, cfg, rng=rng, stats=self.stats_)

    def augment(self, X, y, ratio: float = 1.0, t_s: int = 500, random_state=None):
        """Return the real set plus ``ceil(ratio * n)`` label-preserving one-step-denoised samples."""
        check_is_fitted(self, "model_")
        X = check_skeletons(X, joints=self.model_.config.num_joints)
        rng = check_rng(self.random_state if random_state is None else random_state)
        mask = self.train_state_.config.mask
        conditions = precompute_conditions(self.model_, X, self.stats_, mask, rng)
        X_all, y_all, _ = build_augmented_set(X, y, ratio, t_s, self.model_, self.schedule_, self.stats_,
                                              rng, conditions)
        return X_all, y_all

    def save(self, path):
        check_is_fitted(self, "model_")
        return save_state(path, self.train_state_)

    @classmethod
    def load(cls, path) -> "MacDiff":
        state = load_state(path)
        est = cls.from_config(state.config)
        est._set_state(state)
        return est

    @classmethod
    def from_config(cls, config: TrainConfig) -> "MacDiff":
        m, mk, d = config.model, config.mask, config.diffusion
        return cls(m.embed_dim, m.mlp_dim, m.heads, m.encoder_layers, m.decoder_layers, m.patch_length,
                   m.num_frames, m.condition_dropout, mk.strategy, mk.ratio, mk.tube_length, mk.keep_joints,
                   mk.keep_patches, d.kind, d.tau, d.T, config.epochs, config.batch_size, config.lr_start,
                   config.lr_end, config.weight_decay, config.max_steps, tuple(config.crop_ratio),
                   config.rotation_max, config.noise_sigma, random_state=config.seed)

    @classmethod
    def from_state(cls, state: TrainState) -> "MacDiff":
        est = cls.from_config(state.config)
        est._set_state(state)
        return est


__all__ = ["MacDiff", "SkeletonScaler"]
