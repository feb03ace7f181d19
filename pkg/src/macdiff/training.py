"""Pre-training loop for the masked conditional diffusion objective."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig
from .diffusion import NoiseSchedule, build_schedule, forward_diffuse
from .masking import make_mask, motion_intensity
from .model import MacDiffNet, ModelConfig, backward, kept_index_tensor
from .skeleton import NormalizationStats, augment, normalize, patchify, random_crop_resize


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainState:
    model: MacDiffNet
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    config: TrainConfig
    stats: NormalizationStats
    step: int = 0
    epoch: int = 0
    losses: list = field(default_factory=list)

    @property
    def schedule(self) -> NoiseSchedule:
        d = self.config.diffusion
        return build_schedule(d.kind, d.T, d.tau)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_start`` then cosine decay to ``lr_end`` at ``total_steps``."""
    if total_steps <= 0:
        return config.lr_start
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(config.warmup_frac * total_steps)
    if step < warmup:
        return config.lr_start * step / warmup
    if total_steps == warmup:
        return config.lr_start
    progress = (step - warmup) / (total_steps - warmup)
    return config.lr_end + (config.lr_start - config.lr_end) * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: MacDiffNet, config: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 and "pos_" not in name else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW([g for g in groups if g["params"]], lr=config.lr_start, betas=(0.9, 0.95))


@dataclass
class Batch:
    """Everything random about one training step, drawn up front."""

    x_enc: torch.Tensor
    x_clean: torch.Tensor
    masks: list
    t: np.ndarray
    eps: torch.Tensor
    drop: np.ndarray


def draw_batch(raw: np.ndarray, config: TrainConfig, stats: NormalizationStats, T: int,
               rng: np.random.Generator) -> Batch:
    mc = config.model
    enc, clean = [], []
    for x in raw:
        if x.shape[0] != mc.num_frames or config.crop_ratio != (1.0, 1.0):
            x = random_crop_resize(x, mc.num_frames, config.crop_ratio, rng)
        e, c = augment(x, config.rotation_max, config.noise_sigma, rng)
        enc.append(normalize(e, stats))
        clean.append(normalize(c, stats))
    x_enc = np.stack(enc).astype(np.float32)
    x_clean = np.stack(clean).astype(np.float32)
    masks = []
    for c in x_clean:
        motion = None
        if config.mask.strategy == "motion_aware":
            motion = motion_intensity(patchify(c, mc.patch_length), mc.patch_length)
        masks.append(make_mask(config.mask, mc.num_patches, mc.num_joints, rng, motion))
    b = len(raw)
    t = rng.integers(1, T + 1, size=b)
    eps = rng.standard_normal(size=x_clean.shape).astype(np.float32)
    drop = rng.random(b) < mc.condition_dropout
    return Batch(torch.from_numpy(x_enc), torch.from_numpy(x_clean), masks, t, torch.from_numpy(eps), drop)


def compute_loss(model: MacDiffNet, batch: Batch, schedule: NoiseSchedule, mode: str = "assembled",
                 denoise_fn: Optional[Callable] = None) -> torch.Tensor:
    """Mean squared noise-prediction error with the masked encoder view as condition."""
    dtype = next(model.parameters()).dtype
    x_enc, x_clean, eps = batch.x_enc.to(dtype), batch.x_clean.to(dtype), batch.eps.to(dtype)
    kept_idx = kept_index_tensor(batch.masks)
    z_local, z_global = model.encode(x_enc, kept_idx)
    cond = model.assemble_condition(z_local, kept_idx, z_global, mode)
    cond = model.condition_dropout(cond, model.config.condition_dropout, training=True, drop=batch.drop)
    x_t = forward_diffuse(x_clean, batch.t, eps, schedule)
    eps_hat = (denoise_fn or model.decode)(x_t, batch.t, cond)
    return ((eps - eps_hat) ** 2).mean()


def train_step(state: TrainState, raw: np.ndarray, schedule: NoiseSchedule, total_steps: int) -> float:
    cfg = state.config
    batch = draw_batch(raw, cfg, state.stats, schedule.T, state.rng)
    state.model.train()
    loss = compute_loss(state.model, batch, schedule, cfg.condition_mode)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()} at step {state.step + 1}")
    state.optimizer.zero_grad(set_to_none=True)
    backward(loss, state.model)
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in state.model.parameters() if p.grad is not None], cfg.grad_clip)
    lr = lr_at(state.step + 1, total_steps, cfg)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.step()
    state.step += 1
    value = float(loss.detach())
    state.losses.append(value)
    return value


def total_steps_for(n: int, config: TrainConfig) -> int:
    if config.max_steps is not None:
        return config.max_steps
    return config.epochs * math.ceil(n / config.batch_size)


def init_state(config: TrainConfig, stats: NormalizationStats, model: Optional[MacDiffNet] = None) -> TrainState:
    model = model if model is not None else MacDiffNet(config.model, seed=config.seed)
    model.freeze_encoder(config.freeze_encoder)
    return TrainState(model, make_optimizer(model, config), np.random.default_rng(config.seed), config, stats)


def run_training(X: np.ndarray, config: TrainConfig, stats: NormalizationStats, out_dir=None,
                 model: Optional[MacDiffNet] = None, resume: Optional[TrainState] = None,
                 progress: Optional[Callable[[int, float], None]] = None) -> TrainState:
    """Train for ``epochs * ceil(N / batch)`` steps (or ``max_steps``), checkpointing atomically."""
    if len(X) == 0:
        raise ValueError("empty training set")
    state = resume or init_state(config, stats, model)
    schedule = state.schedule
    n = len(X)
    total = total_steps_for(n, config)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss.csv", "a" if resume else "w", newline="")
        writer = csv.writer(log_fh)
        if not resume:
            writer.writerow(["step", "loss", "lr"])
    try:
        while state.step < total:
            order = state.rng.permutation(n)
            for start in range(0, n, config.batch_size):
                if state.step >= total:
                    break
                loss = train_step(state, X[order[start:start + config.batch_size]], schedule, total)
                if log_fh:
                    writer.writerow([state.step, repr(loss), repr(lr_at(state.step, total, config))])
                if progress:
                    progress(state.step, loss)
            else:
                state.epoch += 1
                if out_dir is not None and config.checkpoint_every and state.epoch % config.checkpoint_every == 0:
                    save_state(out_dir / "checkpoint", state)
                continue
            break
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        save_state(out_dir / "checkpoint", state)
    return state


def state_manifest(state: TrainState) -> dict:
    opt_steps = []
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            s = state.optimizer.state.get(p, {})
            opt_steps.append(float(s["step"]) if "step" in s else None)
    return {
        "step": state.step,
        "epoch": state.epoch,
        "config": state.config.to_dict(),
        "model_config": state.model.config.to_dict(),
        "stats": state.stats.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "optimizer_steps": opt_steps,
        "losses": state.losses,
    }


def state_tensors(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = ckpt.model_tensors(state.model)
    names = {id(p): n for n, p in state.model.named_parameters()}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            s = state.optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in s:
                    tensors[f"optim/{names[id(p)]}/{key}"] = s[key]
    return tensors


def save_state(path, state: TrainState) -> Path:
    return ckpt.save_checkpoint(path, state_tensors(state), state_manifest(state))


def load_state(path) -> TrainState:
    """Rebuild a resumable :class:`TrainState` (model, AdamW moments, RNG) from a checkpoint."""
    tensors, manifest = ckpt.read_checkpoint(path)
    config = TrainConfig.from_dict(manifest["config"])
    stats = NormalizationStats.from_dict(manifest["stats"])
    model = MacDiffNet(ModelConfig(**manifest["model_config"]), seed=config.seed)
    ckpt.assign_model(model, tensors)
    state = init_state(config, stats, model)
    names = {id(p): n for n, p in model.named_parameters()}
    params = [p for g in state.optimizer.param_groups for p in g["params"]]
    for p, step in zip(params, manifest["optimizer_steps"]):
        if step is None:
            continue
        name = names[id(p)]
        state.optimizer.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": tensors[f"optim/{name}/exp_avg"].to(p.dtype),
            "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].to(p.dtype),
        }
    state.rng.bit_generator.state = manifest["rng_state"]
    state.step, state.epoch = manifest["step"], manifest["epoch"]
    state.losses = list(manifest.get("losses", []))
    return state


@dataclass
class GradCheckReport:
    passed: bool
    fraction_ok: float
    checked: int
    worst_tensor: str
    worst_rel_error: float
    seconds: float
    per_tensor: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def grad_check(tolerance: float = 1e-4, h: float = 1e-4, max_coords: int = 4000, seed: int = 0,
               zero_params: bool = False, required_fraction: float = 0.95,
               config: Optional[ModelConfig] = None) -> GradCheckReport:
    """Compare autograd against central finite differences in float64.

    ``config`` defaults to a 2-token model; pass ``ModelConfig.tiny()`` to check the tiny architecture
    (so a sampled subset of ``max_coords`` coordinates is used).
    """
    t0 = time.time()
    from .masking import MaskSpec
    mc = config or ModelConfig(embed_dim=8, mlp_dim=16, heads=2, encoder_layers=1, decoder_layers=1,
                               patch_length=1, num_frames=2, num_joints=1, condition_dropout=0.0)
    model = MacDiffNet(mc, seed=seed).double()
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in model.parameters():
            if zero_params:
                p.zero_()
            else:
                p.add_(torch.from_numpy(rng.normal(0, 0.3, size=tuple(p.shape))))
    x = rng.normal(size=(2, mc.num_frames, mc.num_joints, 3))
    batch = Batch(
        x_enc=torch.from_numpy(x + rng.normal(0, 0.005, size=x.shape)),
        x_clean=torch.from_numpy(x),
        masks=[make_mask(MaskSpec(ratio=0.5), mc.num_patches, mc.num_joints, rng) for _ in range(2)],
        t=np.array([250, 700]),
        eps=torch.from_numpy(rng.normal(size=x.shape)),
        drop=np.array([False, True]),
    )
    schedule = build_schedule("inverse_cosine", 1000)

    def loss_fn():
        return compute_loss(model, batch, schedule)

    model.zero_grad(set_to_none=True)
    grads = backward(loss_fn(), model)
    named = dict(model.named_parameters())
    coords = [(n, i) for n, p in named.items() for i in range(p.numel())]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    ok, worst, worst_name, per_tensor = 0, 0.0, "", {}
    with torch.no_grad():
        for name, i in coords:
            flat = named[name].view(-1)
            orig = flat[i].item()
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[name].reshape(-1)[i].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            ok += rel < tolerance
            per_tensor[name] = max(per_tensor.get(name, 0.0), rel)
            if rel >= worst:
                worst, worst_name = rel, name
    frac = ok / len(coords)
    return GradCheckReport(bool(frac >= required_fraction), frac, len(coords), worst_name, worst,
                           time.time() - t0, per_tensor)
