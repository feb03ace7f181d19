"""DDIM generation, inpainting and one-step-denoise augmentation.

Every routine takes an optional ``denoise_fn(x_t, t, cond) -> eps_hat`` so the
sampler can be driven by an oracle instead of the trained decoder.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import torch

from .config import InpaintConfig, SamplerConfig
from .diffusion import NoiseSchedule, eps_from, forward_diffuse, timestep_ladder, x0_from
from .masking import MaskSpec, make_mask
from .model import ConditionTokens, MacDiffNet, kept_index_tensor
from .skeleton import NormalizationStats, denormalize, normalize, resample_frames

DenoiseFn = Callable[[torch.Tensor, np.ndarray, ConditionTokens], torch.Tensor]


def ddim_step(x_t, t: int, t_prev: int, eps_hat, s: NoiseSchedule, clip_x0: Optional[float] = None):
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    With ``clip_x0`` the clean estimate is clamped to ``[-clip_x0, clip_x0]`` and the
    noise estimate is re-derived from it, so the update stays on the forward path.
    """
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    x0_hat = x0_from(x_t, eps_hat, t, s)
    if clip_x0 is not None:
        x0_hat = x0_hat.clamp(-clip_x0, clip_x0) if torch.is_tensor(x0_hat) else np.clip(x0_hat, -clip_x0, clip_x0)
        eps_hat = eps_from(x0_hat, x_t, t, s)
    if t_prev == 0:
        return x0_hat
    ab = s.alpha_bar[t_prev]
    return math.sqrt(ab) * x0_hat + math.sqrt(1.0 - ab) * eps_hat


def _denoiser(model: Optional[MacDiffNet], denoise_fn: Optional[DenoiseFn]) -> DenoiseFn:
    if denoise_fn is not None:
        return denoise_fn
    if model is None:
        raise RuntimeError("no trained model loaded and no denoiser supplied")
    return model.decode


def _shape(model: Optional[MacDiffNet], shape):
    if shape is not None:
        return tuple(shape)
    if model is None:
        raise RuntimeError("no trained model loaded and no output shape supplied")
    c = model.config
    return (c.num_frames, c.num_joints, 3)


def _condition(model, n, condition, mode):
    if mode == "unconditional" or condition is None:
        return model.null_condition(n) if model is not None else None
    return condition


@torch.no_grad()
def sample(n: int, model: Optional[MacDiffNet], schedule: NoiseSchedule, sampler: SamplerConfig = SamplerConfig(),
           condition: Optional[ConditionTokens] = None, rng: Optional[np.random.Generator] = None,
           stats: Optional[NormalizationStats] = None, denoise_fn: Optional[DenoiseFn] = None,
           shape=None) -> np.ndarray:
    """Draw ``n`` sequences with DDIM from pure noise; denormalized when ``stats`` is given."""
    rng = rng if rng is not None else np.random.default_rng(0)
    fn = _denoiser(model, denoise_fn)
    dtype = next(model.parameters()).dtype if model is not None else torch.float64
    cond = _condition(model, n, condition, sampler.mode)
    x = torch.from_numpy(rng.standard_normal(size=(n, *_shape(model, shape)))).to(dtype)
    ladder = timestep_ladder(schedule.T, sampler.num_steps)
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        eps_hat = fn(x, np.full(n, t), cond)
        x = ddim_step(x, int(t), int(t_prev), eps_hat, schedule, sampler.clip_x0)
    out = x.cpu().numpy()
    return denormalize(out, stats) if stats is not None else out


def observed_token_mask(observed: np.ndarray, patch_length: int) -> np.ndarray:
    """Tokens whose every frame is observed, shape (Tp, V)."""
    t0, v = observed.shape
    return observed.reshape(t0 // patch_length, patch_length, v).all(axis=1)


@torch.no_grad()
def condition_from_observed(model: MacDiffNet, x_norm: np.ndarray, observed: np.ndarray,
                            mode: str = "global_only") -> ConditionTokens:
    """Encode only the fully observed tokens of each sequence (batch of one mask)."""
    tokens = observed_token_mask(observed, model.config.patch_length)
    idx = np.flatnonzero(tokens)
    if idx.size == 0:
        raise ValueError("no fully observed token to condition on")
    b = x_norm.shape[0]
    kept = torch.as_tensor(np.broadcast_to(idx, (b, idx.size)).copy(), dtype=torch.long)
    dtype = next(model.parameters()).dtype
    return model.condition(torch.from_numpy(np.asarray(x_norm)).to(dtype), kept, mode)


@torch.no_grad()
def inpaint(x_occluded: np.ndarray, observed_mask: np.ndarray, model: Optional[MacDiffNet],
            schedule: NoiseSchedule, cfg: InpaintConfig = InpaintConfig(),
            condition: Optional[ConditionTokens] = None, rng: Optional[np.random.Generator] = None,
            stats: Optional[NormalizationStats] = None, denoise_fn: Optional[DenoiseFn] = None) -> np.ndarray:
    """Fill unobserved entries by DDIM with known-region replacement.

    ``x_occluded`` is ``(T0, V, 3)`` or ``(B, T0, V, 3)``; ``observed_mask`` is ``(T0, V)``.
    The observed region of the result is copied from the input verbatim.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    observed = np.asarray(observed_mask, dtype=bool)
    if not observed.any():
        raise ValueError("observed region is empty")
    single = np.ndim(x_occluded) == 3
    x_in = np.asarray(x_occluded)[None] if single else np.asarray(x_occluded)
    if observed.all():
        return x_in[0].copy() if single else x_in.copy()
    known_np = normalize(x_in, stats) if stats is not None else x_in
    fn = _denoiser(model, denoise_fn)
    dtype = next(model.parameters()).dtype if model is not None else torch.float64
    if condition is None and model is not None:
        condition = condition_from_observed(model, known_np, observed)
    known = torch.from_numpy(np.ascontiguousarray(known_np)).to(dtype)
    keep = torch.from_numpy(observed)[None, :, :, None]
    n = known.shape[0]
    x = torch.from_numpy(rng.standard_normal(size=known.shape)).to(dtype)
    ladder = timestep_ladder(schedule.T, cfg.num_steps)
    for t, t_prev in zip(ladder[:-1], ladder[1:]):
        t, t_prev = int(t), int(t_prev)
        for r in range(cfg.resample_count):
            eps_hat = fn(x, np.full(n, t), condition)
            x_prev = ddim_step(x, t, t_prev, eps_hat, schedule, cfg.clip_x0)
            noise = torch.from_numpy(rng.standard_normal(size=known.shape)).to(dtype)
            known_prev = forward_diffuse(known, t_prev, noise, schedule)
            x_prev = torch.where(keep, known_prev, x_prev)
            if r < cfg.resample_count - 1 and t_prev > 0:
                ratio = schedule.alpha_bar[t] / schedule.alpha_bar[t_prev]
                fresh = torch.from_numpy(rng.standard_normal(size=known.shape)).to(dtype)
                x = math.sqrt(ratio) * x_prev + math.sqrt(1 - ratio) * fresh
            else:
                x = x_prev
    out = x.cpu().numpy()
    out = denormalize(out, stats) if stats is not None else out
    out = np.where(observed[None, :, :, None], x_in, out).astype(x_in.dtype)
    return out[0] if single else out


@torch.no_grad()
def one_step_denoise(x0: np.ndarray, model: Optional[MacDiffNet], schedule: NoiseSchedule, t_s: int,
                     rng: np.random.Generator, condition: Optional[ConditionTokens] = None,
                     stats: Optional[NormalizationStats] = None,
                     denoise_fn: Optional[DenoiseFn] = None) -> np.ndarray:
    """Noise normalized ``x0`` to ``t_s``, predict the noise once, and invert back to a clean sample."""
    schedule.check_t(t_s)
    fn = _denoiser(model, denoise_fn)
    dtype = next(model.parameters()).dtype if model is not None else torch.float64
    x0_t = torch.from_numpy(np.ascontiguousarray(x0)).to(dtype)
    eps = torch.from_numpy(rng.standard_normal(size=x0_t.shape)).to(dtype)
    ts = np.full(x0_t.shape[0], t_s)
    x_t = forward_diffuse(x0_t, ts, eps, schedule)
    eps_hat = fn(x_t, ts, condition)
    out = x0_from(x_t, eps_hat, ts, schedule).cpu().numpy()
    return denormalize(out, stats) if stats is not None else out


def to_model_frames(X: np.ndarray, num_frames: int) -> np.ndarray:
    X = np.asarray(X)
    if X.shape[-3] == num_frames:
        return X
    return resample_frames(X, num_frames)


@torch.no_grad()
def precompute_conditions(model: MacDiffNet, X: np.ndarray, stats: NormalizationStats,
                          mask: Optional[MaskSpec], rng: np.random.Generator) -> torch.Tensor:
    """Condition tokens of each labeled sample, drawn once with the pre-training mask (or none)."""
    mc = model.config
    x_norm = normalize(to_model_frames(X, mc.num_frames), stats).astype(np.float32)
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(x_norm).to(dtype)
    kept = None
    if mask is not None and mask.strategy != "motion_aware":
        kept = kept_index_tensor([make_mask(mask, mc.num_patches, mc.num_joints, rng) for _ in range(len(X))])
    return model.condition(x, kept, "assembled").z.clone()


@torch.no_grad()
def build_augmented_set(X: np.ndarray, y: np.ndarray, ratio: float, t_s: int, model: MacDiffNet,
                        schedule: NoiseSchedule, stats: NormalizationStats, rng: np.random.Generator,
                        conditions: Optional[torch.Tensor] = None, batch_size: int = 256):
    """Append ``ceil(ratio * N)`` one-step-denoised copies of random real samples.

    Returns ``(X_all, y_all, source_index)``; ``source_index`` is -1 for real rows.
    Augmented rows live at the model's frame count, so real rows are resampled to it too.
    """
    if ratio < 0:
        raise ValueError("augment-to-real ratio must be non-negative")
    X = to_model_frames(X, model.config.num_frames)
    y = np.asarray(y)
    n = len(X)
    m = math.ceil(ratio * n - 1e-9)
    if m == 0:
        return X, y, np.full(n, -1)
    if conditions is None:
        conditions = precompute_conditions(model, X, stats, None, rng)
    src = rng.integers(0, n, size=m)
    x_norm = normalize(X, stats).astype(np.float32)
    out = []
    for start in range(0, m, batch_size):
        idx = src[start:start + batch_size]
        cond = ConditionTokens(conditions[torch.as_tensor(idx)], "assembled")
        out.append(one_step_denoise(x_norm[idx], model, schedule, t_s, rng, cond, stats))
    X_aug = np.concatenate(out).astype(X.dtype)
    return (np.concatenate([X, X_aug]), np.concatenate([y, y[src]]),
            np.concatenate([np.full(n, -1), src]))


__all__ = [
    "ddim_step", "sample", "inpaint", "one_step_denoise", "build_augmented_set", "precompute_conditions",
    "condition_from_observed", "observed_token_mask", "to_model_frames",
]
