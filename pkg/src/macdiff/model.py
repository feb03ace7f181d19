"""Masked transformer encoder and AdaLN-conditioned diffusion decoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import Mask
from .skeleton import patchify, unpatchify

LN_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    pass


class MissingGradientError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    embed_dim: int = 256
    mlp_dim: int = 1024
    heads: int = 8
    encoder_layers: int = 8
    decoder_layers: int = 5
    patch_length: int = 4
    num_frames: int = 120
    num_joints: int = 25
    condition_dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.num_frames % self.patch_length:
            raise ValueError(f"num_frames {self.num_frames} not divisible by patch_length {self.patch_length}")
        if not 0 <= self.condition_dropout < 1:
            raise ValueError("condition_dropout must lie in [0, 1)")

    @property
    def num_patches(self) -> int:
        return self.num_frames // self.patch_length

    @property
    def patch_dim(self) -> int:
        return self.patch_length * 3

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(embed_dim=32, mlp_dim=64, heads=4, encoder_layers=2, decoder_layers=2,
                    patch_length=4, num_frames=32, num_joints=25)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditionTokens:
    z: torch.Tensor  # (B, Tp, V, C)
    source: str


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Interleaved ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with a geometric frequency ladder."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = torch.zeros(t.shape[0], dim, dtype=torch.float64)
    emb[:, 0:2 * half:2] = torch.sin(args)
    emb[:, 1:2 * half:2] = torch.cos(args)
    return emb


def pool(z_local: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis (-2)."""
    if z_local.shape[-2] == 0:
        raise ValueError("cannot pool zero tokens")
    return z_local.mean(dim=-2)


def adaln_modulate(normed, z_s, z_b, t_s, t_b):
    return z_s * (t_s * normed + t_b) + z_b


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite activations after {where}")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AdaLN(nn.Module):
    """``z_s * (t_s * LN(h) + t_b) + z_b`` with per-token condition and per-sample timestep projections.

    Initialised so that every scale is one and every shift zero.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.z_proj = nn.Linear(dim, 2 * dim)
        self.t_proj = nn.Linear(dim, 2 * dim)

    def reset_identity(self):
        for proj in (self.z_proj, self.t_proj):
            nn.init.zeros_(proj.weight)
            with torch.no_grad():
                proj.bias.zero_()
                proj.bias[: self.dim] = 1.0

    def forward(self, h, z, t_emb):
        z_s, z_b = self.z_proj(z).chunk(2, dim=-1)
        t_s, t_b = self.t_proj(t_emb).unsqueeze(1).chunk(2, dim=-1)
        normed = F.layer_norm(h, (self.dim,), eps=LN_EPS)
        return adaln_modulate(normed, z_s, z_b, t_s, t_b)


class DecoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = AdaLN(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = AdaLN(dim)
        self.mlp = Mlp(dim, mlp_dim)

    def forward(self, x, z, t_emb):
        x = x + self.attn(self.norm1(x, z, t_emb))
        return x + self.mlp(self.norm2(x, z, t_emb))


class PatchEmbed(nn.Module):
    def __init__(self, patch_dim: int, dim: int, tp: int, v: int):
        super().__init__()
        self.proj = nn.Linear(patch_dim, dim)
        self.pos_spatial = nn.Parameter(torch.zeros(1, v, dim))
        self.pos_temporal = nn.Parameter(torch.zeros(tp, 1, dim))

    def forward(self, grid):
        return self.proj(grid) + self.pos_spatial + self.pos_temporal


class TimestepEmbedder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        raw = sinusoidal_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(raw)))


class MacDiffNet(nn.Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        c, tp, v = config.embed_dim, config.num_patches, config.num_joints
        self.encoder_embed = PatchEmbed(config.patch_dim, c, tp, v)
        self.encoder_blocks = nn.ModuleList(
            EncoderBlock(c, config.heads, config.mlp_dim) for _ in range(config.encoder_layers))
        self.encoder_norm = nn.LayerNorm(c, eps=LN_EPS)
        self.decoder_embed = PatchEmbed(config.patch_dim, c, tp, v)
        self.time_embed = TimestepEmbedder(c)
        self.decoder_blocks = nn.ModuleList(
            DecoderBlock(c, config.heads, config.mlp_dim) for _ in range(config.decoder_layers))
        self.decoder_norm = AdaLN(c)
        self.head = nn.Linear(c, config.patch_dim)
        self.null_token = nn.Parameter(torch.zeros(c))
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for emb in (self.encoder_embed, self.decoder_embed):
            nn.init.normal_(emb.pos_spatial, std=0.02)
            nn.init.normal_(emb.pos_temporal, std=0.02)
        nn.init.normal_(self.time_embed.fc1.weight, std=0.02)
        nn.init.normal_(self.time_embed.fc2.weight, std=0.02)
        nn.init.normal_(self.null_token, std=0.02)
        for m in self.modules():
            if isinstance(m, AdaLN):
                m.reset_identity()
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def encoder_parameters(self):
        for mod in (self.encoder_embed, self.encoder_blocks, self.encoder_norm):
            yield from mod.parameters()

    def freeze_encoder(self, frozen: bool = True):
        for p in self.encoder_parameters():
            p.requires_grad_(not frozen)
        return self

    # encoder path

    def embed(self, x0):
        """Normalized skeletons ``(B, T0, V, 3)`` to positioned tokens ``(B, Tp, V, C)``."""
        grid = patchify(x0, self.config.patch_length)
        return self.encoder_embed(grid)

    def encoder_forward(self, tokens):
        x = tokens
        for i, block in enumerate(self.encoder_blocks):
            x = block(x)
            _check_finite(x, f"encoder layer {i}")
        return self.encoder_norm(x)

    def encode(self, x0, kept_idx: Optional[torch.Tensor] = None):
        """Return ``(z_local, z_global)``; ``kept_idx`` is ``(B, K)`` row-major token indices or None for all."""
        tokens = self.embed(x0)
        b, tp, v, c = tokens.shape
        tokens = tokens.reshape(b, tp * v, c)
        if kept_idx is not None:
            tokens = torch.gather(tokens, 1, kept_idx[..., None].expand(-1, -1, c))
        z_local = self.encoder_forward(tokens)
        return z_local, pool(z_local)

    def assemble_condition(self, z_local, kept_idx, z_global, mode: str = "assembled") -> ConditionTokens:
        b, _, c = z_local.shape
        tp, v = self.config.num_patches, self.config.num_joints
        if mode == "assembled":
            if kept_idx is None:
                if z_local.shape[1] != tp * v:
                    raise ValueError("assembled condition without a mask needs every token")
                return ConditionTokens(z_local.reshape(b, tp, v, c), mode)
            if kept_idx.shape != z_local.shape[:2]:
                raise ValueError(f"mask indices {tuple(kept_idx.shape)} inconsistent with {tuple(z_local.shape)}")
            base = z_global[:, None, :].expand(b, tp * v, c)
            z = base.scatter(1, kept_idx[..., None].expand(-1, -1, c), z_local)
            return ConditionTokens(z.reshape(b, tp, v, c), mode)
        if mode == "global_only":
            return ConditionTokens(z_global[:, None, None, :].expand(b, tp, v, c), mode)
        if mode == "null":
            return self.null_condition(b)
        raise ValueError(f"unknown condition mode {mode!r}")

    def null_condition(self, batch: int) -> ConditionTokens:
        tp, v, c = self.config.num_patches, self.config.num_joints, self.config.embed_dim
        return ConditionTokens(self.null_token.expand(batch, tp, v, c), "null")

    def condition_dropout(self, cond: ConditionTokens, p_drop: float, rng: Optional[np.random.Generator] = None,
                          training: bool = True, drop: Optional[np.ndarray] = None) -> ConditionTokens:
        if not training:
            return cond
        b = cond.z.shape[0]
        if drop is None:
            drop = rng.random(b) < p_drop if p_drop > 0 else np.zeros(b, dtype=bool)
        flags = torch.as_tensor(np.asarray(drop, dtype=bool)).reshape(b, 1, 1, 1)
        z = torch.where(flags, self.null_token.expand_as(cond.z), cond.z)
        return ConditionTokens(z, cond.source)

    def condition(self, x0, kept_idx=None, mode: str = "assembled") -> ConditionTokens:
        z_local, z_global = self.encode(x0, kept_idx)
        return self.assemble_condition(z_local, kept_idx, z_global, mode)

    # decoder path

    def timestep_embed(self, t):
        return self.time_embed(t)

    def decode(self, x_t, t, cond):
        """Predict noise ``(B, T0, V, 3)`` from the full noisy grid, timesteps ``(B,)`` and condition."""
        z = cond.z if isinstance(cond, ConditionTokens) else cond
        b = x_t.shape[0]
        h = self.decoder_embed(patchify(x_t, self.config.patch_length))
        tp, v, c = h.shape[1:]
        h = h.reshape(b, tp * v, c)
        z = z.reshape(b, tp * v, c)
        t = torch.as_tensor(np.broadcast_to(np.asarray(t), (b,)).copy())
        t_emb = self.timestep_embed(t)
        for i, block in enumerate(self.decoder_blocks):
            h = block(h, z, t_emb)
            _check_finite(h, f"decoder layer {i}")
        out = self.head(self.decoder_norm(h, z, t_emb))
        return unpatchify(out.reshape(b, tp, v, -1), self.config.patch_length)


def kept_index_tensor(masks: Sequence[Mask]) -> torch.Tensor:
    ks = {m.K for m in masks}
    if len(ks) != 1:
        raise ValueError(f"masks in a batch must keep the same number of tokens, got {sorted(ks)}")
    return torch.as_tensor(np.stack([m.kept_indices for m in masks]), dtype=torch.long)


def backward(loss: torch.Tensor, model: nn.Module, strict: bool = True) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every trainable parameter, stored in ``.grad``."""
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        if g is None:
            if strict:
                raise MissingGradientError(f"no gradient path from the loss to {name}")
            g = torch.zeros_like(p)
        p.grad = g
        out[name] = g
    return out


def parameter_count(config: ModelConfig) -> int:
    return sum(p.numel() for p in MacDiffNet(config).parameters())
