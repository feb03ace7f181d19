"""Noise schedules and the closed-form algebra of the Gaussian forward process."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

KINDS = ("linear", "cosine", "inverse_cosine", "blend")
BETA_MIN, BETA_MAX = 1e-8, 0.999


def _alpha_bar_cosine(u):
    return np.cos(u * np.pi / 2) ** 2


def _alpha_bar_inverse_cosine(u):
    return 1.0 - (2.0 / np.pi) * np.arccos(np.sqrt(1.0 - u))


@dataclass(frozen=True)
class NoiseSchedule:
    """``beta[t - 1]`` is beta_t for t in 1..T; ``alpha_bar[t]`` for t in 0..T with ``alpha_bar[0] == 1``."""

    T: int
    kind: str
    tau: Optional[float]
    beta: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t, lo: int = 1):
        t_arr = np.asarray(t)
        if np.any(t_arr < lo) or np.any(t_arr > self.T) or not np.all(t_arr == np.floor(t_arr)):
            raise ValueError(f"timestep(s) {t} outside [{lo}, {self.T}]")
        return t_arr.astype(int)

    def rows(self):
        for t in range(1, self.T + 1):
            yield t, float(self.beta[t - 1]), float(self.alpha_bar[t]), float(snr(t, self))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha_bar", "snr"])
            for row in self.rows():
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])


def build_schedule(kind: str = "inverse_cosine", T: int = 1000, tau: Optional[float] = None) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if kind not in KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if kind == "blend":
        if tau is None:
            raise ValueError("blend schedule needs tau")
        if not -1.0 <= tau <= 1.0:
            raise ValueError(f"tau must lie in [-1, 1], got {tau}")

    if kind == "linear":
        beta = np.linspace(1e-4, 0.02, T, dtype=np.float64)
    else:
        u = np.arange(T + 1, dtype=np.float64) / T
        if kind == "cosine":
            ab = _alpha_bar_cosine(u)
        elif kind == "inverse_cosine":
            ab = _alpha_bar_inverse_cosine(u)
        else:
            ab = (1 - tau) / 2 * _alpha_bar_cosine(u) + (1 + tau) / 2 * _alpha_bar_inverse_cosine(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = 1.0 - ab[1:] / ab[:-1]
        beta = np.nan_to_num(beta, nan=BETA_MAX)
    beta = np.clip(beta, BETA_MIN, BETA_MAX)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    beta.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, kind, None if kind != "blend" else float(tau), beta, alpha_bar)


def _coef(values, x):
    """Broadcast per-sample coefficients against ``x`` (numpy or torch)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim:
        values = values.reshape(values.shape + (1,) * (x.ndim - values.ndim))
    try:
        import torch
        if isinstance(x, torch.Tensor):
            return torch.as_tensor(values, dtype=x.dtype, device=x.device)
    except ImportError:  # pragma: no cover
        pass
    return values.astype(x.dtype) if np.issubdtype(np.asarray(x).dtype, np.floating) else values


def forward_diffuse(x0, t, eps, s: NoiseSchedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` may be a scalar or one step per leading item."""
    t = s.check_t(t, lo=0)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    ab = s.alpha_bar[t]
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1 - ab), x0) * eps


def eps_from(x0, x_t, t, s: NoiseSchedule):
    t = s.check_t(t, lo=0)
    ab = s.alpha_bar[t]
    if np.any(ab >= 1.0):
        raise ZeroDivisionError("eps is undefined where alpha_bar == 1")
    return (x_t - _coef(np.sqrt(ab), x_t) * x0) / _coef(np.sqrt(1 - ab), x_t)


def x0_from(x_t, eps_hat, t, s: NoiseSchedule):
    t = s.check_t(t, lo=0)
    ab = s.alpha_bar[t]
    return (x_t - _coef(np.sqrt(1 - ab), x_t) * eps_hat) / _coef(np.sqrt(ab), x_t)


def snr(t, s: NoiseSchedule):
    t = s.check_t(t)
    ab = s.alpha_bar[t]
    return ab / (1.0 - ab)


def timestep_ladder(T: int, num_steps: int) -> np.ndarray:
    """Uniform-stride DDIM ladder ``T = t_0 > t_1 > ... > t_n = 0``."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in [1, {T}]")
    ladder = np.round(np.linspace(T, 0, num_steps + 1)).astype(int)
    assert np.all(np.diff(ladder) < 0)
    return ladder


def sample_timesteps(n: int, T: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(1, T + 1, size=n)
