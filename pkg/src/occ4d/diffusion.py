"""Trajectory-conditioned diffusion transformer over flattened token grids.

Tokens are handled as (B, c, M) with M = t'*h'*w' positions in row-major
(t, h, w) order. Diffusion steps g run 1..G; array index g-1 holds step g.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .tokenizer import NonFiniteError, check_grads

DENOISER_MAGIC = b"ODM1"


class DiffusionSchedule:
    """Per-step noise constants and forward-process posterior coefficients.

    `timesteps[g-1]` is the time index fed to the denoiser's step embedding;
    for respaced schedules it is the index into the base schedule, so one
    denoiser can be sampled with different step counts.
    """

    def __init__(self, betas, timesteps=None):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.G = betas.size
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.alpha_bars_prev = np.append(1.0, self.alpha_bars[:-1])
        self.posterior_variance = betas * (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        # step 1 has zero posterior variance; borrow step 2's for the log
        pv = self.posterior_variance
        self.posterior_log_variance_clipped = np.log(np.append(pv[1] if self.G > 1 else betas[0], pv[1:]))
        self.posterior_mean_coef_x0 = betas * np.sqrt(self.alpha_bars_prev) / (1.0 - self.alpha_bars)
        self.posterior_mean_coef_xg = (1.0 - self.alpha_bars_prev) * np.sqrt(self.alphas) / (1.0 - self.alpha_bars)
        if timesteps is None:
            timesteps = np.arange(self.G)
        self.timesteps = np.asarray(timesteps, dtype=np.int64)

    @classmethod
    def linear(cls, G: int, beta_start: float = 1e-4, beta_end: float = 2e-2, base_steps: int = 1000):
        """Linear betas over `base_steps`, respaced to G evenly spaced steps when G < base_steps."""
        if G < 1 or G > base_steps:
            raise ValueError(f"G must be in [1, {base_steps}]")
        base_ab = np.cumprod(1.0 - np.linspace(beta_start, beta_end, base_steps, dtype=np.float64))
        if G == base_steps:
            return cls(np.linspace(beta_start, beta_end, base_steps, dtype=np.float64))
        idx = np.unique(np.round(np.linspace(0, base_steps - 1, G)).astype(np.int64))
        ab = base_ab[idx]
        betas = 1.0 - ab / np.append(1.0, ab[:-1])
        return cls(betas, timesteps=idx)

    def _at(self, arr, g: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        g = torch.as_tensor(g, dtype=torch.long)
        if (g < 1).any() or (g > self.G).any():
            raise IndexError(f"diffusion step out of range 1..{self.G}")
        v = torch.as_tensor(arr, dtype=like.dtype)[g - 1]
        return v.reshape(v.shape + (1,) * (like.dim() - v.dim()))

    def model_time(self, g) -> torch.Tensor:
        g = torch.as_tensor(g, dtype=torch.long)
        return torch.as_tensor(self.timesteps)[g - 1]


def sinusoid(positions: torch.Tensor, C: int) -> torch.Tensor:
    """(..., C) table: even channels sin(i / 10000^(2k/C)), odd channels cos of the same."""
    if C % 2:
        raise ValueError(f"embedding width must be even, got {C}")
    k = torch.arange(C // 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * 2 * k / C)
    ang = positions.to(torch.float64)[..., None] * freq
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return out.reshape(*positions.shape, C)


def positional_embedding(C: int, M: int) -> torch.Tensor:
    """(C, M) sinusoidal table for positions 0..M-1."""
    if M < 1:
        raise ValueError("M must be positive")
    return sinusoid(torch.arange(M), C).T.contiguous()


def flatten_tokens(values: torch.Tensor) -> torch.Tensor:
    """(..., c, t, h, w) -> (..., c, t*h*w), row-major over (t, h, w)."""
    return values.reshape(*values.shape[:-3], -1)


def unflatten_tokens(flat: torch.Tensor, dims) -> torch.Tensor:
    return flat.reshape(*flat.shape[:-1], *dims)


@dataclass(frozen=True)
class DiffusionConfig:
    token_channels: int = 16  # c
    token_dims: tuple[int, int, int] = (2, 4, 4)  # (t', h', w')
    traj_len: int = 8
    width: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    learn_sigma: bool = True
    traj_scale: float = 4.0  # meters; half the grid extent
    use_time_embedding: bool = True
    use_trajectory: bool = True
    # "width": table added after the input projection; "tokens": added to the raw c-channel tokens
    pos_embed: str = "width"

    def __post_init__(self):
        object.__setattr__(self, "token_dims", tuple(int(d) for d in self.token_dims))
        if self.pos_embed not in ("width", "tokens"):
            raise ValueError(f"pos_embed must be 'width' or 'tokens', got {self.pos_embed!r}")
        if self.pos_embed == "tokens" and self.token_channels % 2:
            raise ValueError("token_channels must be even for the sinusoidal position table")
        if self.width % self.heads:
            raise ValueError("heads must divide width")
        if self.width % 2:
            raise ValueError("width must be even")

    @property
    def num_tokens(self) -> int:
        return math.prod(self.token_dims)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        return cls(**d)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        B, M, C = x.shape
        q, k, v = self.qkv(x).reshape(B, M, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.proj(y.transpose(1, 2).reshape(B, M, C))


class Block(nn.Module):
    """Transformer block with condition-driven shift/scale/gate on both sublayers."""

    def __init__(self, width: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(width * mlp_ratio)
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width))
        self.modulation = nn.Linear(width, 6 * width)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x, cond):
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(F.silu(cond)).chunk(6, dim=-1)
        x = x + g1[:, None] * self.attn(modulate(self.norm1(x), sh1, sc1))
        return x + g2[:, None] * self.mlp(modulate(self.norm2(x), sh2, sc2))


class Denoiser(nn.Module):
    def __init__(self, cfg: DiffusionConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        pos_dim = w if cfg.pos_embed == "width" else cfg.token_channels
        self.register_buffer("pos_table", positional_embedding(pos_dim, cfg.num_tokens).float())
        self.register_buffer("token_scale", torch.ones(()))
        self.inp = nn.Linear(cfg.token_channels, w)
        self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.traj_mlp = nn.Sequential(nn.Linear(2 * cfg.traj_len, w), nn.SiLU(), nn.Linear(w, w))
        self.blocks = nn.ModuleList(Block(w, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(w, elementwise_affine=False, eps=1e-6)
        self.final_modulation = nn.Linear(w, 2 * w)
        out = 2 * cfg.token_channels if cfg.learn_sigma else cfg.token_channels
        self.head = nn.Linear(w, out)
        for lin in (self.final_modulation, self.head):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoid(torch.as_tensor(t), self.cfg.width).to(self.inp.weight.dtype))

    def normalize_trajectory(self, traj: torch.Tensor) -> torch.Tensor:
        if traj.shape[-2:] != (self.cfg.traj_len, 2):
            raise ValueError(f"trajectory must have shape (..., {self.cfg.traj_len}, 2), got {tuple(traj.shape)}")
        rel = (traj - traj[..., :1, :]) / self.cfg.traj_scale
        return rel.reshape(*traj.shape[:-2], 2 * self.cfg.traj_len).to(self.inp.weight.dtype)

    def trajectory_embedding(self, traj: torch.Tensor) -> torch.Tensor:
        return self.traj_mlp(self.normalize_trajectory(traj))

    def condition(self, traj: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        cond = torch.zeros(traj.shape[0], self.cfg.width, dtype=self.inp.weight.dtype)
        if self.cfg.use_time_embedding:
            cond = cond + self.time_embedding(t)
        if self.cfg.use_trajectory:
            cond = cond + self.trajectory_embedding(traj)
        return cond

    def forward(self, x: torch.Tensor, traj: torch.Tensor, t: torch.Tensor, pos_table: torch.Tensor | None = None):
        """x: (B, c, M) noisy tokens; traj: (B, T, 2); t: (B,) model time indices.

        Returns (eps_hat, var_param) each (B, c, M); var_param is None without learned variance.
        """
        B, c, M = x.shape
        if c != self.cfg.token_channels or M != self.cfg.num_tokens:
            raise ValueError(f"expected tokens (B, {self.cfg.token_channels}, {self.cfg.num_tokens}), got {tuple(x.shape)}")
        pos = self.pos_table if pos_table is None else pos_table
        pos = pos.to(x.dtype)
        if self.cfg.pos_embed == "tokens":
            h = self.inp((x + pos).transpose(1, 2))
        else:
            h = self.inp(x.transpose(1, 2)) + pos.T
        cond = self.condition(traj, t)
        for i, blk in enumerate(self.blocks):
            h = blk(h, cond)
            if not torch.isfinite(h).all():
                raise NonFiniteError(f"non-finite activations after block {i}")
        sh, sc = self.final_modulation(F.silu(cond)).chunk(2, dim=-1)
        out = self.head(modulate(self.final_norm(h), sh, sc)).transpose(1, 2)
        if self.cfg.learn_sigma:
            eps, v = out.chunk(2, dim=1)
            return eps, v
        return out, None


def condition_vector(traj, step, model: Denoiser) -> torch.Tensor:
    """g = nu(step) + delta(traj) for a single trajectory (T, 2) and integer step."""
    traj = torch.as_tensor(np.asarray(traj.positions if hasattr(traj, "positions") else traj))
    return model.condition(traj[None].to(model.inp.weight.dtype), torch.tensor([step]))[0]


def forward_noise(x0: torch.Tensor, g, noise: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """x_g = sqrt(abar_g) x0 + sqrt(1 - abar_g) eps."""
    if noise.shape != x0.shape:
        raise ValueError("noise must have the same shape as x0")
    g = torch.as_tensor(g, dtype=torch.long)
    if g.dim() == 0 and x0.dim() > 0:
        ab = schedule._at(schedule.alpha_bars, g, x0)
    else:
        ab = schedule._at(schedule.alpha_bars, g, x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * noise


def denoise_predict(model: Denoiser, x_g: torch.Tensor, traj: torch.Tensor, g, schedule: DiffusionSchedule):
    g = torch.as_tensor(g, dtype=torch.long).reshape(-1).expand(x_g.shape[0])
    return model(x_g, traj, schedule.model_time(g))


def q_posterior(x0, x_g, g, schedule: DiffusionSchedule):
    """Mean, variance and clipped log-variance of q(x_{g-1} | x_g, x0)."""
    mean = schedule._at(schedule.posterior_mean_coef_x0, g, x0) * x0 + schedule._at(schedule.posterior_mean_coef_xg, g, x0) * x_g
    var = schedule._at(schedule.posterior_variance, g, x0)
    logvar = schedule._at(schedule.posterior_log_variance_clipped, g, x0)
    return mean, var, logvar


def p_mean(eps_hat, x_g, g, schedule: DiffusionSchedule):
    """mu_theta = (x_g - beta_g / sqrt(1 - abar_g) * eps_hat) / sqrt(alpha_g)."""
    beta = schedule._at(schedule.betas, g, x_g)
    ab = schedule._at(schedule.alpha_bars, g, x_g)
    alpha = schedule._at(schedule.alphas, g, x_g)
    return (x_g - beta / (1 - ab).sqrt() * eps_hat) / alpha.sqrt()


def p_logvar(var_param, g, schedule: DiffusionSchedule, like: torch.Tensor):
    """Log-variance of p_theta: fixed posterior variance, or interpolation between it and beta_g."""
    min_log = schedule._at(schedule.posterior_log_variance_clipped, g, like)
    if var_param is None:
        return min_log.expand_as(like)
    max_log = schedule._at(np.log(schedule.betas), g, like)
    frac = (var_param + 1) / 2
    return frac * max_log + (1 - frac) * min_log


def normal_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2))."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def gaussian_nll(x, mean, logvar):
    return 0.5 * (math.log(2 * math.pi) + logvar + (x - mean) ** 2 * torch.exp(-logvar))


def loss_simple(model: Denoiser, x0, traj, g, noise, schedule: DiffusionSchedule) -> torch.Tensor:
    """1/2 * mean over all elements of (eps_hat - eps)^2."""
    x_g = forward_noise(x0, g, noise, schedule)
    eps_hat, _ = denoise_predict(model, x_g, traj, g, schedule)
    return 0.5 * ((eps_hat - noise) ** 2).mean()


def vlb_terms(eps_hat, var_param, x0, x_g, g, schedule: DiffusionSchedule, detach_mean: bool = True):
    """Per-sample variational-bound term: KL to the posterior for g > 1, NLL of x0 at g = 1."""
    if var_param is None:
        raise ValueError("the variational bound needs a learned-variance denoiser")
    g = torch.as_tensor(g, dtype=torch.long).reshape(-1).expand(x0.shape[0])
    if detach_mean:
        eps_hat = eps_hat.detach()
    mean = p_mean(eps_hat, x_g, g, schedule)
    logvar = p_logvar(var_param, g, schedule, x_g)
    true_mean, _, true_logvar = q_posterior(x0, x_g, g, schedule)
    kl = normal_kl(true_mean, true_logvar, mean, logvar).flatten(1).mean(1)
    nll = gaussian_nll(x0, mean, logvar).flatten(1).mean(1)
    return torch.where(g == 1, nll, kl)


def loss_vlb(model: Denoiser, x0, traj, g, noise, schedule: DiffusionSchedule, detach_mean: bool = True):
    if not model.cfg.learn_sigma:
        raise ValueError("loss_vlb requires learn_sigma=True")
    x_g = forward_noise(x0, g, noise, schedule)
    eps_hat, v = denoise_predict(model, x_g, traj, g, schedule)
    return vlb_terms(eps_hat, v, x0, x_g, g, schedule, detach_mean).mean()


def diffusion_train_step(model: Denoiser, opt: torch.optim.Optimizer, x0: torch.Tensor, traj: torch.Tensor,
                         schedule: DiffusionSchedule, stage: str = "simple", vlb_weight: float = 1e-3,
                         generator: torch.Generator | None = None, lr: float | None = None) -> dict:
    """One optimizer step. x0: (B, c, M) scaled tokens, traj: (B, T, 2)."""
    if stage not in ("simple", "full"):
        raise ValueError(f"unknown stage {stage!r}")
    if lr is not None:
        for grp in opt.param_groups:
            grp["lr"] = lr
    model.train()
    B = x0.shape[0]
    g = torch.randint(1, schedule.G + 1, (B,), generator=generator)
    noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_g = forward_noise(x0, g, noise, schedule)
    eps_hat, v = model(x_g, traj, schedule.model_time(g))
    l_simple = 0.5 * ((eps_hat - noise) ** 2).mean()
    if stage == "full":
        l_vlb = vlb_terms(eps_hat, v, x0, x_g, g, schedule).mean()
        total = l_simple + vlb_weight * l_vlb
    else:
        l_vlb = torch.zeros(())
        total = l_simple
    if not torch.isfinite(total):
        raise NonFiniteError(f"non-finite diffusion loss {total.item()}")
    opt.zero_grad(set_to_none=True)
    total.backward()
    check_grads(model)
    opt.step()
    return {"stage": stage, "l_simple": l_simple.item(), "l_vlb": l_vlb.item(), "total": total.item()}


def save_denoiser(path, model: Denoiser, opt=None, step: int = 0, generator: torch.Generator | None = None,
                  extra: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    if opt is not None:
        tensors.update(checkpoint.optimizer_tensors(opt, [n for n, _ in model.named_parameters()]))
    if generator is not None:
        tensors["rng/generator"] = generator.get_state()
    meta = {"config": model.cfg.to_dict(), "step": step, **(extra or {})}
    checkpoint.save_tensors(path, DENOISER_MAGIC, tensors, meta)


def load_denoiser(path, opt_lr: float | None = None, weight_decay: float = 0.01):
    """Returns (model, meta, tensors) or (model, opt, meta, tensors) when opt_lr is given."""
    tensors, meta = checkpoint.load_tensors(path, DENOISER_MAGIC)
    model = Denoiser(DiffusionConfig.from_dict(meta["config"]))
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(("optim/", "rng/"))})
    if opt_lr is None:
        return model, meta, tensors
    opt = torch.optim.AdamW(model.parameters(), lr=opt_lr, weight_decay=weight_decay)
    checkpoint.restore_optimizer(opt, [n for n, _ in model.named_parameters()], tensors)
    return model, opt, meta, tensors
