"""Run configuration: one YAML file with a section per component."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .diffusion import DiffusionConfig
from .tokenizer import TokenizerConfig
from .toyworld import DEFAULT_KINDS, WorldConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorldSection:
    dims: list = field(default_factory=lambda: [8, 16, 16, 4])
    cell_size: float = 0.5
    dt: float = 0.5
    n_static_obstacles: int = 20
    n_dynamic_cars: int = 2
    road_half_width: int = 2
    kinds: list = field(default_factory=lambda: list(DEFAULT_KINDS))
    clips_per_kind: int = 50


@dataclass
class TokenizerSection:
    class_embed_dim: int = 4
    levels: int = 2
    latent_channels: int = 16
    codebook_size: int = 64
    attn_groups: int = 8
    commitment_beta: float = 0.25
    dropout: float = 0.1
    dead_code_steps: int = 200
    inverse_frequency_weights: bool = False


@dataclass
class DiffusionSection:
    width: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0
    learn_sigma: bool = True
    use_time_embedding: bool = True
    use_trajectory: bool = True
    pos_embed: str = "width"  # or "tokens"


@dataclass
class ScheduleSection:
    train_steps: int = 1000  # G used for training
    sample_steps: int = 100  # G used for sampling (respaced)
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class OptimSection:
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    steps: int = 2000
    eval_interval: int = 500
    checkpoint_interval: int = 0  # 0: only at the end
    lr_schedule: str = "constant"  # or "cosine": decay to zero over `steps`


@dataclass
class DiffusionOptimSection(OptimSection):
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 6000
    simple_fraction: float = 0.8
    vlb_weight: float = 1e-3


@dataclass
class PathsSection:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"


_SECTIONS = {
    "world": WorldSection,
    "tokenizer": TokenizerSection,
    "diffusion": DiffusionSection,
    "schedule": ScheduleSection,
    "train_tokenizer": OptimSection,
    "train_diffusion": DiffusionOptimSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    seed: int
    world: WorldSection = field(default_factory=WorldSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train_tokenizer: OptimSection = field(default_factory=OptimSection)
    train_diffusion: DiffusionOptimSection = field(default_factory=DiffusionOptimSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def __post_init__(self):
        self.validate()

    # -- derived component configs -------------------------------------------------

    def world_config(self, seed: int | None = None) -> WorldConfig:
        w = self.world
        return WorldConfig(tuple(w.dims), w.cell_size, w.n_static_obstacles, w.n_dynamic_cars,
                           self.seed if seed is None else seed, w.road_half_width, w.dt)

    def tokenizer_config(self, num_classes: int = 8, class_weights=None) -> TokenizerConfig:
        t = self.tokenizer
        return TokenizerConfig(num_classes=num_classes, depth=self.world.dims[3], class_embed_dim=t.class_embed_dim,
                               levels=t.levels, latent_channels=t.latent_channels, codebook_size=t.codebook_size,
                               attn_groups=t.attn_groups, commitment_beta=t.commitment_beta, dropout=t.dropout,
                               dead_code_steps=t.dead_code_steps, class_weights=class_weights)

    def diffusion_config(self) -> DiffusionConfig:
        d = self.diffusion
        tcfg = self.tokenizer_config()
        T, H, W, _ = self.world.dims
        return DiffusionConfig(token_channels=tcfg.latent_channels, token_dims=tcfg.token_dims((T, H, W)),
                               traj_len=T, width=d.width, depth=d.depth, heads=d.heads, mlp_ratio=d.mlp_ratio,
                               learn_sigma=d.learn_sigma, traj_scale=H * self.world.cell_size / 2,
                               use_time_embedding=d.use_time_embedding, use_trajectory=d.use_trajectory,
                               pos_embed=d.pos_embed)

    def path(self, name: str) -> Path:
        p = Path(getattr(self.paths, name))
        return p if p.is_absolute() else self.base_dir / p

    # -- validation / io -----------------------------------------------------------

    def validate(self) -> None:
        if not isinstance(self.seed, int):
            raise ConfigError("seed: mandatory integer")
        dims = self.world.dims
        if len(dims) != 4 or any(not isinstance(d, int) or d < 1 for d in dims):
            raise ConfigError(f"world.dims: need 4 positive integers, got {dims}")
        f = 2**self.tokenizer.levels
        for i, name in enumerate("THW"):
            if dims[i] % f:
                raise ConfigError(f"world.dims[{i}] ({name}={dims[i]}) is not divisible by 2^tokenizer.levels={f}")
        for k in self.world.kinds:
            if k not in DEFAULT_KINDS:
                raise ConfigError(f"world.kinds: unknown trajectory kind {k!r}")
        if self.world.clips_per_kind < 0:
            raise ConfigError("world.clips_per_kind: must be non-negative")
        if self.diffusion.pos_embed not in ("width", "tokens"):
            raise ConfigError(f"diffusion.pos_embed: expected 'width' or 'tokens', got {self.diffusion.pos_embed!r}")
        if not 0 <= self.train_diffusion.simple_fraction <= 1:
            raise ConfigError("train_diffusion.simple_fraction: must be in [0, 1]")
        if not 1 <= self.schedule.sample_steps <= self.schedule.train_steps:
            raise ConfigError("schedule.sample_steps: must be in [1, schedule.train_steps]")
        for name, sec in (("train_tokenizer", self.train_tokenizer), ("train_diffusion", self.train_diffusion)):
            if sec.batch_size < 1:
                raise ConfigError(f"{name}.batch_size: must be positive")
            if sec.steps < 0:
                raise ConfigError(f"{name}.steps: must be non-negative")
            if sec.lr < 0:
                raise ConfigError(f"{name}.lr: must be non-negative")
            if sec.lr_schedule not in ("constant", "cosine"):
                raise ConfigError(f"{name}.lr_schedule: expected 'constant' or 'cosine', got {sec.lr_schedule!r}")
        try:
            self.world_config()
            self.tokenizer_config()
            self.diffusion_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        blob = json.dumps({n: d[n] for n in names}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        if "seed" not in raw:
            raise ConfigError("seed: mandatory field missing")
        kwargs = {"seed": raw["seed"], "base_dir": Path(base_dir)}
        for key, value in raw.items():
            if key == "seed":
                continue
            if key not in _SECTIONS:
                raise ConfigError(f"{key}: unknown section")
            sec_cls = _SECTIONS[key]
            value = value or {}
            allowed = {f.name for f in fields(sec_cls)}
            for k in value:
                if k not in allowed:
                    raise ConfigError(f"{key}.{k}: unknown field")
            try:
                kwargs[key] = sec_cls(**value)
            except TypeError as e:
                raise ConfigError(f"{key}: {e}") from e
        return cls(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    return RunConfig.from_dict(raw, base_dir=path.parent)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
