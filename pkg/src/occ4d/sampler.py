"""Ancestral sampling of token grids and the noise + trajectory -> occupancy pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .core import OccupancySequence, Trajectory, vocab_for
from .diffusion import DiffusionSchedule, Denoiser, p_logvar, p_mean, unflatten_tokens
from .tokenizer import NonFiniteError, TokenGrid, Tokenizer, quantize_latent


def executed_steps(G: int, ratio: float) -> int:
    """ceil(ratio * G), robust to float noise such as 0.3 * 10 = 3.0000000000000004."""
    return max(1, math.ceil(round(ratio * G, 9)))


@dataclass(frozen=True)
class SamplingSpec:
    steps_G: int
    trajectory: Trajectory
    denoise_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps_G < 1:
            raise ValueError("steps_G must be positive")
        if not 0 < self.denoise_ratio <= 1:
            raise ValueError(f"denoise_ratio must be in (0, 1], got {self.denoise_ratio}")

    @property
    def n_steps(self) -> int:
        return executed_steps(self.steps_G, self.denoise_ratio)


@torch.no_grad()
def sample_flat(model: Denoiser, schedule: DiffusionSchedule, trajs: torch.Tensor, seeds, ratio: float = 1.0,
                learned_variance: bool = True) -> torch.Tensor:
    """Run the reverse chain for a batch; returns tokens (B, c, M) in the tokenizer's scale.

    Each sample draws x_G and the per-step noise from its own generator seeded
    with seeds[i]. Steps G, G-1, ..., G-n+1 are executed with n = ceil(ratio*G);
    the last executed step adds no noise.
    """
    if not torch.isfinite(torch.cat([p.reshape(-1) for p in model.parameters()])).all():
        raise NonFiniteError("denoiser parameters contain NaN/inf")
    model.eval()
    cfg = model.cfg
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = (cfg.token_channels, cfg.num_tokens)
    x = torch.stack([torch.randn(shape, generator=gen) for gen in gens])
    n = executed_steps(schedule.G, ratio)
    use_learned = learned_variance and cfg.learn_sigma
    for g in range(schedule.G, schedule.G - n, -1):
        gg = torch.full((x.shape[0],), g, dtype=torch.long)
        eps, v = model(x, trajs, schedule.model_time(gg))
        mean = p_mean(eps, x, gg, schedule)
        if g == schedule.G - n + 1:
            x = mean
            break
        # fixed variance: the clipped log only differs at g = 1, which never injects noise
        logvar = p_logvar(v if use_learned else None, gg, schedule, x)
        z = torch.stack([torch.randn(shape, generator=gen) for gen in gens])
        x = mean + torch.exp(0.5 * logvar) * z
    return x * model.token_scale


def sample_tokens(spec: SamplingSpec, model: Denoiser, schedule: DiffusionSchedule | None = None,
                  codebook: torch.Tensor | None = None, learned_variance: bool = True) -> TokenGrid:
    """Sample one token grid; snapped to `codebook` when given."""
    if schedule is None:
        schedule = DiffusionSchedule.linear(spec.steps_G)
    if schedule.G != spec.steps_G:
        raise ValueError(f"schedule has {schedule.G} steps, SamplingSpec asks for {spec.steps_G}")
    traj = torch.tensor(np.asarray(spec.trajectory.positions))[None]
    flat = sample_flat(model, schedule, traj, [spec.seed], spec.denoise_ratio, learned_variance)
    values = unflatten_tokens(flat, model.cfg.token_dims)
    if codebook is None:
        return TokenGrid(values[0])
    q, idx, _ = quantize_latent(values, codebook)
    return TokenGrid(q[0], idx[0])


@torch.no_grad()
def decode_tokens(tokenizer: Tokenizer, values: torch.Tensor, snap: bool = True) -> np.ndarray:
    """(B, c, t', h', w') tokens -> (B, T, H, W, D) uint8 labels via per-voxel argmax."""
    tokenizer.eval()
    if snap:
        values, _, _ = quantize_latent(values, tokenizer.codebook.codes)
    return tokenizer.decode(values).argmax(dim=1).numpy().astype(np.uint8)


def generate_batch(tokenizer: Tokenizer, model: Denoiser, schedule: DiffusionSchedule, trajs, seeds,
                   ratio: float = 1.0, snap: bool = True, learned_variance: bool = True) -> list[OccupancySequence]:
    t = torch.as_tensor(np.stack([np.asarray(tr.positions) for tr in trajs]))
    flat = sample_flat(model, schedule, t, seeds, ratio, learned_variance)
    labels = decode_tokens(tokenizer, unflatten_tokens(flat, model.cfg.token_dims), snap)
    vocab = vocab_for(tokenizer.cfg.num_classes)
    return [OccupancySequence(lab, vocab) for lab in labels]


def generate_clip(spec: SamplingSpec, tokenizer: Tokenizer, model: Denoiser,
                  schedule: DiffusionSchedule | None = None, snap: bool = True) -> tuple[OccupancySequence, Trajectory]:
    if schedule is None:
        schedule = DiffusionSchedule.linear(spec.steps_G)
    (seq,) = generate_batch(tokenizer, model, schedule, [spec.trajectory], [spec.seed], spec.denoise_ratio, snap)
    return seq, spec.trajectory
