"""Command line entry point: ``occ4d <verb> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics, pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .core import ClipFormatError, Trajectory, read_clip, render_clip, write_clip
from .diffusion import DiffusionSchedule, load_denoiser
from .sampler import SamplingSpec, generate_batch, generate_clip
from .tokenizer import NonFiniteError, load_tokenizer
from .toyworld import DEFAULT_KINDS, generate_dataset, make_trajectory

log = logging.getLogger("occ4d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _tokenizer_path(cfg: RunConfig) -> Path:
    return cfg.path("checkpoint_dir") / "tokenizer.otk"


def _denoiser_path(cfg: RunConfig) -> Path:
    return cfg.path("checkpoint_dir") / "denoiser.odm"


def _load_clips(data_dir) -> pipeline.ClipSet:
    try:
        return pipeline.load_clips(data_dir)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e


def cmd_make_data(args) -> int:
    cfg = load_config(args.config)
    out = cfg.path("data_dir")
    manifest = generate_dataset(cfg.world_config(), cfg.world.kinds, cfg.world.clips_per_kind, out)
    print(manifest)
    print(f"{len(cfg.world.kinds) * cfg.world.clips_per_kind} clips")
    return EXIT_OK


def cmd_train_tokenizer(args) -> int:
    cfg = load_config(args.config)
    clips = _load_clips(cfg.path("data_dir"))
    ckpt_dir = cfg.path("checkpoint_dir")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    if args.dry_run:
        tcfg = cfg.tokenizer_config()
        log.info("tokenizer input %s -> tokens %s", clips.labels.shape[1:], tcfg.token_dims(clips.labels.shape[1:4]))
        pipeline.train_tokenizer(cfg, clips, ckpt_dir / "dry_run.otk", steps=1)
        print("dry run ok")
        return EXIT_OK
    ckpt = _tokenizer_path(cfg)
    pipeline.train_tokenizer(cfg, clips, ckpt, steps=args.steps, resume=args.resume,
                             loss_csv=ckpt_dir / "tokenizer_loss.csv", stop_at=args.stop_at)
    print(ckpt)
    return EXIT_OK


def _checked_tokenizer(cfg: RunConfig, path):
    tok, meta = load_tokenizer(path)
    want = pipeline.tokenizer_hash(cfg)
    if meta.get("config_hash") not in (None, want):
        raise CheckpointError(f"tokenizer checkpoint {path} was trained with a different config "
                              f"(hash {meta.get('config_hash')} != {want})")
    return tok, meta


def cmd_train_diffusion(args) -> int:
    cfg = load_config(args.config)
    tok_path = Path(args.tokenizer) if args.tokenizer else _tokenizer_path(cfg)
    if not tok_path.exists():
        raise DataError(f"tokenizer checkpoint not found: {tok_path}")
    tok, meta = _checked_tokenizer(cfg, tok_path)
    data_dir = cfg.path("data_dir")
    clips = _load_clips(data_dir)
    ckpt_dir = cfg.path("checkpoint_dir")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = data_dir / "manifest.csv"
    key = "|".join([hashlib.sha256(tok_path.read_bytes()).hexdigest()[:16],
                    hashlib.sha256(manifest.read_bytes()).hexdigest()[:16], str(len(clips))])
    tokens = pipeline.cached_tokens(tok, clips, ckpt_dir / "tokens.cache", key)
    extra = {"tokenizer_hash": pipeline.tokenizer_hash(cfg), "schedule": vars(cfg.schedule)}
    if args.dry_run:
        pipeline.train_diffusion(cfg, tokens, clips.trajs, ckpt_dir / "dry_run.odm", steps=1, extra_meta=extra)
        print("dry run ok")
        return EXIT_OK
    ckpt = _denoiser_path(cfg)
    pipeline.train_diffusion(cfg, tokens, clips.trajs, ckpt, steps=args.steps, resume=args.resume,
                             loss_csv=ckpt_dir / "diffusion_loss.csv", extra_meta=extra, stop_at=args.stop_at)
    print(ckpt)
    return EXIT_OK


def _load_models(args, cfg: RunConfig | None):
    tok_path = Path(args.tokenizer) if args.tokenizer else (_tokenizer_path(cfg) if cfg else None)
    den_path = Path(args.denoiser) if args.denoiser else (_denoiser_path(cfg) if cfg else None)
    if tok_path is None or den_path is None:
        raise ConfigError("checkpoints: pass --config or both --tokenizer and --denoiser")
    for p in (tok_path, den_path):
        if not p.exists():
            raise DataError(f"checkpoint not found: {p}")
    tok, tok_meta = load_tokenizer(tok_path)
    den, den_meta, _ = load_denoiser(den_path)
    want = den_meta.get("tokenizer_hash")
    have = tok_meta.get("config_hash")
    if want and have and want != have:
        raise CheckpointError(f"denoiser was trained on tokens from a different tokenizer config ({want} != {have})")
    if den.cfg.token_channels != tok.cfg.latent_channels:
        raise CheckpointError("denoiser token width does not match the tokenizer latent width")
    return tok, den, den_meta


def _schedule(den_meta: dict, G: int) -> DiffusionSchedule:
    s = den_meta.get("schedule", {})
    base = int(s.get("train_steps", 1000))
    if not 1 <= G <= base:
        raise ConfigError(f"steps: must be in [1, {base}] for this denoiser, got {G}")
    return DiffusionSchedule.linear(G, s.get("beta_start", 1e-4), s.get("beta_end", 2e-2), base_steps=base)


def _read_trajectory_csv(path, T: int) -> Trajectory:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.lower().replace(" ", "") == "x,y":
            continue
        try:
            x, y = (float(v) for v in line.split(","))
        except ValueError as e:
            raise DataError(f"bad trajectory row {line!r} in {path}") from e
        rows.append((x, y))
    if len(rows) != T:
        raise DataError(f"trajectory file has {len(rows)} rows, the model expects T={T}")
    return Trajectory(np.array(rows))


def cmd_generate(args) -> int:
    cfg = load_config(args.config) if args.config else None
    if not 0 < args.ratio <= 1:
        raise ConfigError(f"ratio: must be in (0, 1], got {args.ratio}")
    tok, den, den_meta = _load_models(args, cfg)
    T = den.cfg.traj_len
    dt = cfg.world.dt if cfg else 0.5
    if args.trajectory_file:
        traj = _read_trajectory_csv(args.trajectory_file, T)
    else:
        if args.trajectory not in DEFAULT_KINDS:
            raise ConfigError(f"trajectory: unknown kind {args.trajectory!r} (choose from {', '.join(DEFAULT_KINDS)})")
        traj = make_trajectory(DEFAULT_KINDS[args.trajectory], T, dt)
    steps = args.steps or (cfg.schedule.sample_steps if cfg else 100)
    schedule = _schedule(den_meta, steps)
    spec = SamplingSpec(steps, traj, args.ratio, args.seed)
    seq, traj = generate_clip(spec, tok, den, schedule, snap=not args.no_snap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_clip(seq, traj, out)
    if args.render:
        render_clip(seq, out.with_suffix("") if out.suffix else out.with_name(out.name + "_frames"))
    print(out)
    return EXIT_OK


def generation_fid(tok, den, schedule, real_stats, kinds, T, dt, n_gen, seed, ratio, snap=True) -> float:
    trajs = [make_trajectory(DEFAULT_KINDS[kinds[i % len(kinds)]], T, dt) for i in range(n_gen)]
    seqs = []
    for s in range(0, n_gen, 32):
        seqs += generate_batch(tok, den, schedule, trajs[s:s + 32], [seed + i for i in range(s, min(s + 32, n_gen))],
                               ratio, snap)
    feats = metrics.extract_features_batch(np.stack([q.labels for q in seqs]), tok)
    return metrics.fid_proxy(real_stats, metrics.FeatureStats.from_features(feats))


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    if args.n_gen < 2:
        raise ConfigError(f"n-gen: need at least 2 generated clips, got {args.n_gen}")
    tok, den, den_meta = _load_models(args, cfg)
    data_dir = Path(args.data) if args.data else (cfg.path("data_dir") if cfg else None)
    if data_dir is None:
        raise ConfigError("data: pass --data or --config")
    clips = _load_clips(data_dir)
    rec = pipeline.recon_metrics(tok, clips.labels)
    dt = cfg.world.dt if cfg else 0.5
    kinds = sorted(set(clips.kinds), key=list(DEFAULT_KINDS).index)
    T = clips.labels.shape[1]
    base_steps = args.steps or (cfg.schedule.sample_steps if cfg else 100)
    report = {"iou": rec["iou"], "miou": rec["miou"], "per_class": {str(k): v for k, v in rec["per_class"].items()},
              "n_real": len(clips), "n_gen": args.n_gen}
    if len(clips) < 2:
        # covariance needs two rows; reconstruction metrics are still reported
        log.warning("dataset has %d clip, fid_proxy skipped", len(clips))
        report["fid_proxy"] = None
        real = None
    else:
        real = metrics.FeatureStats.from_features(metrics.extract_features_batch(clips.labels, tok))
        report["fid_proxy"] = generation_fid(tok, den, _schedule(den_meta, base_steps), real, kinds, T, dt,
                                             args.n_gen, args.seed, 1.0)
    ratios = _floats(args.sweep_ratio) if args.sweep_ratio else None
    step_list = [int(v) for v in _floats(args.sweep_steps)] if args.sweep_steps else None
    if (ratios or step_list) and real is not None:
        rows = []
        for G in step_list or [base_steps]:
            sched = _schedule(den_meta, G)
            for r in ratios or [1.0]:
                if not 0 < r <= 1:
                    raise ConfigError(f"sweep-ratio: {r} not in (0, 1]")
                fid = generation_fid(tok, den, sched, real, kinds, T, dt, args.n_gen, args.seed, r)
                rows.append({"steps": G, "ratio": r, "fid_proxy": fid})
                log.info("steps %d ratio %.2f fid_proxy %.4f", G, r, fid)
        report["sweep"] = rows
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(out)
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        seq, _ = read_clip(args.clip)
    except FileNotFoundError as e:
        raise DataError(str(e)) from e
    paths = render_clip(seq, args.out)
    print(f"{len(paths)} frames written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occ4d", description="4D occupancy tokenizer and trajectory-conditioned diffusion")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("make-data", help="generate the synthetic clip dataset")
    s.add_argument("config")
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train-tokenizer", help="train the scene tokenizer")
    s.add_argument("config")
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--stop-at", type=int, help="stop early at this step (checkpoint stays resumable)")
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_train_tokenizer)

    s = sub.add_parser("train-diffusion", help="train the diffusion transformer on cached tokens")
    s.add_argument("config")
    s.add_argument("--tokenizer", help="tokenizer checkpoint (default: <checkpoint_dir>/tokenizer.otk)")
    s.add_argument("--steps", type=int)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--stop-at", type=int)
    s.add_argument("--dry-run", action="store_true")
    s.set_defaults(func=cmd_train_diffusion)

    for name, func in (("generate", cmd_generate), ("eval", cmd_eval)):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--tokenizer")
        s.add_argument("--denoiser")
        s.add_argument("--steps", type=int)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)
        if name == "generate":
            g = s.add_mutually_exclusive_group(required=True)
            g.add_argument("--trajectory", help=f"one of {', '.join(DEFAULT_KINDS)}")
            g.add_argument("--trajectory-file", help="CSV with T rows x,y")
            s.add_argument("--ratio", type=float, default=1.0)
            s.add_argument("--render", action="store_true", help="also write one PPM per frame")
            s.add_argument("--no-snap", action="store_true", help="decode raw samples without codebook snapping")
        else:
            s.add_argument("--data", help="dataset directory (default: config data_dir)")
            s.add_argument("--n-gen", type=int, default=64)
            s.add_argument("--sweep-ratio")
            s.add_argument("--sweep-steps")

    s = sub.add_parser("render", help="render an OCCV clip to PPM frames")
    s.add_argument("clip")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    threads = os.environ.get("OCC4D_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ClipFormatError, CheckpointError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
