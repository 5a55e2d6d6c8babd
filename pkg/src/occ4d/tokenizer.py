"""4D occupancy scene tokenizer: category embedding, 3D conv encoder, codebook, 3D conv decoder.

Tensor layouts used throughout (B = batch):

    labels   (B, T, H, W, D)          int64 class indices
    embedded (B, D*c', T, H, W)       channel index = d * c' + k
    latent   (B, c, T/2^L, H/2^L, W/2^L)
    logits   (B, num_classes, T, H, W, D)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .core import OccupancySequence

TOKENIZER_MAGIC = b"OTK1"


class NonFiniteError(FloatingPointError):
    """A loss, activation or gradient became NaN/inf."""


@dataclass(frozen=True)
class TokenizerConfig:
    num_classes: int = 8
    depth: int = 4  # D, the height axis folded into channels
    class_embed_dim: int = 4  # c'
    levels: int = 2  # L
    latent_channels: int = 16  # c
    codebook_size: int = 64  # N
    attn_groups: int = 8
    commitment_beta: float = 0.25
    dropout: float = 0.1
    dead_code_steps: int = 200  # 0 disables dead-code reinitialization
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.class_weights is not None:
            object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
            if len(self.class_weights) != self.num_classes:
                raise ValueError("class_weights needs one entry per class")
        if min(self.num_classes, self.depth, self.class_embed_dim, self.latent_channels) < 1:
            raise ValueError("num_classes, depth, class_embed_dim and latent_channels must be positive")
        if self.levels < 0:
            raise ValueError("levels must be non-negative")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be at least 2")
        if self.deep_channels % self.attn_groups:
            raise ValueError(f"attn_groups={self.attn_groups} must divide {self.deep_channels} channels")

    @property
    def base_channels(self) -> int:
        return self.depth * self.class_embed_dim

    @property
    def deep_channels(self) -> int:
        return self.base_channels * 2**self.levels

    def token_dims(self, input_dims) -> tuple[int, int, int]:
        """(t', h', w') for an input (T, H, W[, D]); raises if not divisible by 2^L."""
        f = 2**self.levels
        for name, n in zip("THW", input_dims[:3]):
            if n % f:
                raise ValueError(f"{name}={n} is not divisible by 2^levels={f}")
        return tuple(n // f for n in input_dims[:3])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        return cls(**d)


def _groups(ch: int) -> int:
    return math.gcd(8, ch)


class ResBlock3d(nn.Module):
    def __init__(self, ch: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv3d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv3d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return x + h


class CrossChannelAttention(nn.Module):
    """Self-attention among channel groups, independently at every (t, h, w) site.

    The C channels are split into `groups` tokens of width C/groups; the tokens
    attend to each other, followed by a small feedforward layer. Both sublayers
    are residual.
    """

    def __init__(self, ch: int, groups: int, dropout: float = 0.0):
        super().__init__()
        self.groups = groups
        d = ch // groups
        self.d = d
        self.group_bias = nn.Parameter(torch.randn(groups, d) * 0.02)
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, 2 * d)
        self.ff2 = nn.Linear(2 * d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        B, C, T, H, W = x.shape
        tok = x.permute(0, 2, 3, 4, 1).reshape(-1, self.groups, self.d) + self.group_bias
        q, k, v = self.qkv(self.norm1(tok)).chunk(3, dim=-1)
        att = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.d), dim=-1)
        tok = tok + self.drop(self.proj(att @ v))
        tok = tok + self.drop(self.ff2(F.silu(self.ff1(self.norm2(tok)))))
        return tok.reshape(B, T, H, W, C).permute(0, 4, 1, 2, 3)


class Encoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        ch = cfg.base_channels
        self.down = nn.ModuleList()
        self.res = nn.ModuleList()
        for _ in range(cfg.levels):
            self.down.append(nn.Conv3d(ch, 2 * ch, 3, stride=2, padding=1))
            self.res.append(ResBlock3d(2 * ch, cfg.dropout))
            ch *= 2
        self.attn = CrossChannelAttention(ch, cfg.attn_groups, cfg.dropout)
        self.out = nn.Conv3d(ch, cfg.latent_channels, 1)

    def forward(self, x):
        for down, res in zip(self.down, self.res):
            x = res(F.silu(down(x)))
        return self.out(self.attn(x))


class Decoder(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        ch = cfg.deep_channels
        self.inp = nn.Conv3d(cfg.latent_channels, ch, 1)
        self.attn = CrossChannelAttention(ch, cfg.attn_groups, cfg.dropout)
        self.res = nn.ModuleList()
        self.up = nn.ModuleList()
        for _ in range(cfg.levels):
            self.res.append(ResBlock3d(ch, cfg.dropout))
            self.up.append(nn.ConvTranspose3d(ch, ch // 2, 4, stride=2, padding=1))
            ch //= 2
        self.head = nn.Conv3d(ch, cfg.depth * cfg.num_classes, 3, padding=1)

    def forward(self, z):
        x = self.attn(self.inp(z))
        for res, up in zip(self.res, self.up):
            x = F.silu(up(res(x)))
        return self.head(x)


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int):
        super().__init__()
        self.codes = nn.Parameter(torch.empty(size, dim).uniform_(-1.0 / size, 1.0 / size))
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.long))
        self.register_buffer("idle_steps", torch.zeros(size, dtype=torch.long))

    def __len__(self):
        return self.codes.shape[0]


def nearest_code(vectors: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the nearest code (squared L2) for each row of `vectors`; ties go to the lowest index.

    Distances are computed from explicit differences rather than the expanded
    ||a||^2 - 2ab + ||b||^2 form so that exact ties stay exact.
    """
    out = torch.empty(vectors.shape[0], dtype=torch.long, device=vectors.device)
    chunk = max(1, 2**20 // max(1, codes.numel()))
    for s in range(0, vectors.shape[0], chunk):
        d = ((vectors[s:s + chunk, None, :] - codes[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = torch.argmin(d, dim=1)
    return out


@dataclass
class TokenGrid:
    """Per-sample token grid: values (c, t', h', w') and optional code indices (t', h', w')."""

    values: torch.Tensor
    code_indices: torch.Tensor | None = field(default=None)

    @property
    def dims(self):
        return tuple(self.values.shape[1:])


def quantize_latent(latent: torch.Tensor, codes: torch.Tensor):
    """Snap each channel vector of a (B, c, t, h, w) latent to its nearest code.

    Returns (values, indices, selected) where `values` carries the straight-through
    gradient to `latent` and `selected` carries gradient to `codes`.
    """
    if not torch.isfinite(latent).all():
        raise NonFiniteError("non-finite latent passed to quantize")
    B, c, t, h, w = latent.shape
    if c != codes.shape[1]:
        raise ValueError(f"latent has {c} channels, codes have dimension {codes.shape[1]}")
    flat = latent.permute(0, 2, 3, 4, 1).reshape(-1, c)
    idx = nearest_code(flat.detach(), codes.detach())
    selected = codes[idx].reshape(B, t, h, w, c).permute(0, 4, 1, 2, 3)
    # forward value is the code bit-for-bit; latent - sg(latent) is an exact zero that carries the gradient
    values = selected.detach() + (latent - latent.detach())
    return values, idx.reshape(B, t, h, w), selected


class Tokenizer(nn.Module):
    def __init__(self, cfg: TokenizerConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.num_classes, cfg.class_embed_dim)
        self.encoder = Encoder(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.latent_channels)
        self.decoder = Decoder(cfg)
        if cfg.class_weights is not None:
            self.register_buffer("class_weights", torch.tensor(cfg.class_weights))
        else:
            self.class_weights = None

    def embed(self, labels: torch.Tensor) -> torch.Tensor:
        if labels.min() < 0 or labels.max() >= self.cfg.num_classes:
            raise ValueError("label out of range for the tokenizer vocabulary")
        B, T, H, W, D = labels.shape
        e = self.embedding(labels)  # (B, T, H, W, D, c')
        return e.permute(0, 4, 5, 1, 2, 3).reshape(B, D * self.cfg.class_embed_dim, T, H, W)

    def encode(self, labels: torch.Tensor) -> torch.Tensor:
        if labels.shape[-1] != self.cfg.depth:
            raise ValueError(f"expected depth {self.cfg.depth}, got {labels.shape[-1]}")
        self.cfg.token_dims(labels.shape[1:4])
        return self.encoder(self.embed(labels))

    def quantize(self, latent: torch.Tensor):
        return quantize_latent(latent, self.codebook.codes)

    def decode(self, values: torch.Tensor) -> torch.Tensor:
        if values.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected {self.cfg.latent_channels} token channels, got {values.shape[1]}")
        x = self.decoder(values)
        B, _, T, H, W = x.shape
        K, D = self.cfg.num_classes, self.cfg.depth
        return x.reshape(B, D, K, T, H, W).permute(0, 2, 3, 4, 5, 1)

    def loss(self, labels: torch.Tensor):
        """Returns (total, parts, aux). parts holds recon/codebook/commit; aux holds latent and indices."""
        latent = self.encode(labels)
        values, idx, selected = self.quantize(latent)
        logits = self.decode(values)
        parts = vq_loss_terms(logits, labels, latent, selected, self.cfg.commitment_beta, self.class_weights)
        total = parts["recon"] + parts["codebook"] + parts["commit"]
        return total, parts, {"latent": latent, "indices": idx, "logits": logits}

    def reconstruct(self, labels: torch.Tensor) -> torch.Tensor:
        latent = self.encode(labels)
        values, _, _ = self.quantize(latent)
        return self.decode(values).argmax(dim=1)


def vq_loss_terms(logits, labels, latent, selected, beta, class_weights=None) -> dict:
    recon = F.cross_entropy(logits, labels, weight=class_weights)
    codebook = F.mse_loss(selected, latent.detach())
    commit = beta * F.mse_loss(latent, selected.detach())
    return {"recon": recon, "codebook": codebook, "commit": commit}


def _labels(seq) -> torch.Tensor:
    if isinstance(seq, OccupancySequence):
        return torch.from_numpy(seq.labels.astype("int64"))[None]
    seq = torch.as_tensor(seq)
    return seq if seq.dim() == 5 else seq[None]


def embed_categories(seq: OccupancySequence, model: Tokenizer) -> torch.Tensor:
    """(D*c', T, H, W) embedding of one clip."""
    return model.embed(_labels(seq))[0]


def encode(seq: OccupancySequence, model: Tokenizer) -> torch.Tensor:
    """Continuous latent (c, t', h', w') of one clip."""
    return model.encode(_labels(seq))[0]


def quantize(latent: torch.Tensor, codebook) -> TokenGrid:
    codes = codebook.codes if isinstance(codebook, Codebook) else torch.as_tensor(codebook)
    values, idx, _ = quantize_latent(latent[None], codes)
    return TokenGrid(values[0], idx[0])


def decode(tokens, model: Tokenizer) -> torch.Tensor:
    """Per-voxel logits (num_classes, T, H, W, D)."""
    values = tokens.values if isinstance(tokens, TokenGrid) else tokens
    return model.decode(values[None])[0]


def tokenizer_loss(seq, model: Tokenizer):
    total, parts, _ = model.loss(_labels(seq))
    return total, parts


def compression_ratio(input_dims, token_dims) -> Fraction:
    """Ratio of spatiotemporal cell counts (T*H*W)/(t'*h'*w'), channels excluded."""
    if len(input_dims) != len(token_dims):
        raise ValueError("dimension tuples must have the same length")
    if any(int(d) <= 0 for d in (*input_dims, *token_dims)):
        raise ValueError("dimensions must be positive")
    return Fraction(math.prod(int(d) for d in input_dims), math.prod(int(d) for d in token_dims))


def make_optimizer(model: nn.Module, lr: float, weight_decay: float = 0.01) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)


def check_grads(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient in {name}")


def tokenizer_train_step(model: Tokenizer, opt: torch.optim.Optimizer, labels: torch.Tensor,
                         lr: float | None = None) -> dict:
    """One AdamW step on the total VQ loss. Returns a loss record of floats."""
    if labels.shape[0] == 0:
        raise ValueError("empty batch")
    if lr is not None:
        for g in opt.param_groups:
            g["lr"] = lr
    model.train()
    total, parts, aux = model.loss(labels)
    if not torch.isfinite(total):
        raise NonFiniteError(f"non-finite tokenizer loss {total.item()}")
    opt.zero_grad(set_to_none=True)
    total.backward()
    check_grads(model)
    opt.step()
    with torch.no_grad():
        _update_codebook_usage(model, aux["indices"], aux["latent"])
        acc = (aux["logits"].argmax(1) == labels).double().mean().item()
    rec = {k: v.item() for k, v in parts.items()}
    rec["total"] = total.item()
    rec["accuracy"] = acc
    return rec


def _update_codebook_usage(model: Tokenizer, indices: torch.Tensor, latent: torch.Tensor) -> None:
    cb = model.codebook
    counts = torch.bincount(indices.reshape(-1), minlength=len(cb))
    cb.usage_counts += counts
    used = counts > 0
    cb.idle_steps[used] = 0
    cb.idle_steps[~used] += 1
    limit = model.cfg.dead_code_steps
    if limit <= 0:
        return
    dead = torch.nonzero(cb.idle_steps >= limit).reshape(-1)
    if dead.numel():
        flat = latent.detach().permute(0, 2, 3, 4, 1).reshape(-1, latent.shape[1])
        pick = torch.randint(flat.shape[0], (dead.numel(),))
        cb.codes.data[dead] = flat[pick].to(cb.codes.dtype)
        cb.idle_steps[dead] = 0


def save_tokenizer(path, model: Tokenizer, opt: torch.optim.Optimizer | None = None, step: int = 0,
                   extra: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    if opt is not None:
        tensors.update(checkpoint.optimizer_tensors(opt, [n for n, _ in model.named_parameters()]))
    tensors["rng/torch"] = torch.get_rng_state()
    meta = {"config": model.cfg.to_dict(), "step": step, **(extra or {})}
    checkpoint.save_tensors(path, TOKENIZER_MAGIC, tensors, meta)


def load_tokenizer(path, opt_lr: float | None = None, weight_decay: float = 0.01, restore_rng: bool = False):
    """Load a tokenizer checkpoint.

    Returns (model, meta) or, when `opt_lr` is given, (model, optimizer, meta)
    with the AdamW state restored.
    """
    tensors, meta = checkpoint.load_tensors(path, TOKENIZER_MAGIC)
    cfg = TokenizerConfig.from_dict(meta["config"])
    model = Tokenizer(cfg)
    sd = {k: v for k, v in tensors.items() if not k.startswith(("optim/", "rng/"))}
    model.load_state_dict(sd)
    if restore_rng:
        torch.set_rng_state(tensors["rng/torch"])
    if opt_lr is None:
        return model, meta
    opt = make_optimizer(model, opt_lr, weight_decay)
    checkpoint.restore_optimizer(opt, [n for n, _ in model.named_parameters()], tensors)
    return model, opt, meta
