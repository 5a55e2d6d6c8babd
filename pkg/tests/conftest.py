import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from occ4d import pipeline
from occ4d.config import RunConfig
from occ4d.core import OccupancySequence, Trajectory, vocab_for
from occ4d.diffusion import DiffusionConfig, load_denoiser
from occ4d.tokenizer import TokenizerConfig, load_tokenizer
from occ4d.toyworld import DEFAULT_KINDS, WorldConfig, generate_clip

torch.set_num_threads(int(os.environ.get("OCC4D_THREADS", "1")))

# acceptance lines collected during the session, printed in the terminal summary
ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"{criterion} {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])


def random_clip(rng: np.random.Generator, dims=(2, 4, 4, 2), num_classes=8):
    labels = rng.integers(0, num_classes, size=dims, dtype=np.uint8)
    traj = Trajectory(rng.normal(size=(dims[0], 2)).astype(np.float32))
    return OccupancySequence(labels, vocab_for(num_classes)), traj


def tiny_tokenizer_config(**kw) -> TokenizerConfig:
    base = dict(num_classes=3, depth=2, class_embed_dim=1, levels=1, latent_channels=2, codebook_size=4,
                attn_groups=2, dropout=0.0, dead_code_steps=0)
    base.update(kw)
    return TokenizerConfig(**base)


def tiny_diffusion_config(**kw) -> DiffusionConfig:
    base = dict(token_channels=2, token_dims=(1, 2, 2), traj_len=2, width=8, depth=1, heads=2, mlp_ratio=2.0)
    base.update(kw)
    return DiffusionConfig(**base)


def randomize(model: torch.nn.Module, seed: int, scale: float = 0.3) -> None:
    """Give every parameter (including zero-initialized modulation) non-trivial values."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


# -- expensive trained artifacts ---------------------------------------------------------------


def _source_digest() -> str:
    h = hashlib.sha256()
    for p in sorted((Path(__file__).parents[1] / "src" / "occ4d").glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _cache_dir(tmp_path_factory, name: str) -> Path:
    """Trained artifacts live in a per-session temp dir, or in OCC4D_TEST_CACHE keyed by source digest."""
    root = os.environ.get("OCC4D_TEST_CACHE")
    if root:
        d = Path(root) / f"{name}-{_source_digest()}"
        d.mkdir(parents=True, exist_ok=True)
        return d
    return tmp_path_factory.mktemp(name)


def _timed(d: Path, key: str, fn):
    """Run fn and store its wall time under `key` in d/timing.json."""
    t0 = time.perf_counter()
    out = fn()
    path = d / "timing.json"
    times = json.loads(path.read_text()) if path.exists() else {}
    times[key] = time.perf_counter() - t0
    path.write_text(json.dumps(times))
    return out


def timing(d: Path) -> dict:
    path = d / "timing.json"
    return json.loads(path.read_text()) if path.exists() else {}


def overfit_config() -> RunConfig:
    return RunConfig.from_dict({
        "seed": 0,
        "train_tokenizer": {"steps": 2000, "batch_size": 1, "eval_interval": 500},
        "train_diffusion": {"steps": 5000, "batch_size": 16, "eval_interval": 0, "lr_schedule": "cosine"},
    })


def overfit_clip():
    return generate_clip(WorldConfig(seed=3), DEFAULT_KINDS["straight"])


@pytest.fixture(scope="session")
def overfit_tokenizer(tmp_path_factory):
    """Tokenizer trained 2000 steps on a single toyworld clip; returns (model, clip, artifact dir)."""
    d = _cache_dir(tmp_path_factory, "overfit")
    ckpt = d / "tokenizer.otk"
    seq, traj = overfit_clip()
    one = pipeline.ClipSet(seq.labels[None], traj.positions[None], ["straight"], ["clip"])
    if ckpt.exists() and (d / "tokenizer_loss.csv").exists():
        model, _ = load_tokenizer(ckpt)
    else:
        model, _ = _timed(d, "tokenizer", lambda: pipeline.train_tokenizer(overfit_config(), one, ckpt,
                                                                            loss_csv=d / "tokenizer_loss.csv"))
    model.eval()
    return model, seq, d


@pytest.fixture(scope="session")
def overfit_diffusion(overfit_tokenizer):
    """Denoiser overfit on 64 cached token grids from the single-clip tokenizer; returns (model, l_simple curve)."""
    tok, _, d = overfit_tokenizer
    ckpt, curve = d / "denoiser.odm", d / "diffusion_loss.csv"
    if not (ckpt.exists() and curve.exists()):
        kinds = list(DEFAULT_KINDS.values())
        clips = [generate_clip(WorldConfig(seed=100 + i), kinds[i % 4]) for i in range(64)]
        labels = np.stack([c[0].labels for c in clips])
        trajs = np.stack([c[1].positions for c in clips])
        tokens = pipeline.encode_tokens(tok, labels)
        _timed(d, "diffusion", lambda: pipeline.train_diffusion(overfit_config(), tokens, trajs, ckpt, loss_csv=curve))
    model, _, _ = load_denoiser(ckpt)
    rows = np.genfromtxt(curve, delimiter=",", names=True, dtype=None, encoding="utf-8")
    return model, np.asarray(rows["l_simple"], dtype=np.float64)


def pipeline_config(base_dir) -> RunConfig:
    return RunConfig.from_dict({
        "seed": 11,
        "world": {"clips_per_kind": 50},
        "train_tokenizer": {"steps": 2000, "batch_size": 8, "eval_interval": 500},
        "train_diffusion": {"steps": 6000, "batch_size": 16, "eval_interval": 0, "lr_schedule": "cosine"},
        "paths": {"data_dir": "data", "checkpoint_dir": "checkpoints"},
    }, base_dir=base_dir)


@pytest.fixture(scope="session")
def trained_pipeline(tmp_path_factory):
    """Tokenizer + denoiser trained on the default 200-clip toy dataset."""
    d = _cache_dir(tmp_path_factory, "pipeline")
    cfg = pipeline_config(d)
    ckpt_dir = cfg.path("checkpoint_dir")
    tok_path, den_path = ckpt_dir / "tokenizer.otk", ckpt_dir / "denoiser.odm"
    from occ4d.toyworld import generate_dataset

    if not (cfg.path("data_dir") / "manifest.csv").exists():
        generate_dataset(cfg.world_config(), cfg.world.kinds, cfg.world.clips_per_kind, cfg.path("data_dir"))
    clips = pipeline.load_clips(cfg.path("data_dir"))
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if tok_path.exists():
        tok, _ = load_tokenizer(tok_path)
    else:
        tok, _ = pipeline.train_tokenizer(cfg, clips, tok_path)
    if not den_path.exists():
        tokens = pipeline.encode_tokens(tok, clips.labels)
        pipeline.train_diffusion(cfg, tokens, clips.trajs, den_path, extra_meta={"schedule": vars(cfg.schedule)})
    den, _, _ = load_denoiser(den_path)
    tok.eval()
    den.eval()
    return cfg, tok, den, clips
