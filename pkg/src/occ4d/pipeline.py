"""Training loops, token caching and evaluation shared by the CLI and the experiments.

Every step derives its randomness from (seed, step), so a run resumed from a
checkpoint at step k replays exactly the batches and noise of an uninterrupted run.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, metrics
from .config import RunConfig
from .core import read_clip
from .diffusion import (Denoiser, DiffusionSchedule, diffusion_train_step, flatten_tokens, load_denoiser,
                        save_denoiser)
from .tokenizer import (NonFiniteError, Tokenizer, load_tokenizer, make_optimizer, quantize_latent, save_tokenizer,
                        tokenizer_train_step)
from .toyworld import read_manifest

log = logging.getLogger(__name__)

TOKEN_CACHE_MAGIC = b"OTC1"


@dataclass
class ClipSet:
    labels: np.ndarray  # (N, T, H, W, D) uint8
    trajs: np.ndarray  # (N, T, 2) float32
    kinds: list
    files: list

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "ClipSet":
        idx = list(idx)
        return ClipSet(self.labels[idx], self.trajs[idx], [self.kinds[i] for i in idx], [self.files[i] for i in idx])


def load_clips(data_dir) -> ClipSet:
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    rows = read_manifest(manifest)
    if not rows:
        raise FileNotFoundError(f"dataset {data_dir} is empty")
    labels, trajs = [], []
    for r in rows:
        seq, traj = read_clip(data_dir / r["file"])
        labels.append(seq.labels)
        trajs.append(traj.positions)
    return ClipSet(np.stack(labels), np.stack(trajs), [r["kind"] for r in rows], [r["file"] for r in rows])


def split_heldout(n: int) -> tuple[list, list]:
    """Every 10th clip is held out; tiny datasets evaluate on their training clips."""
    if n < 10:
        return list(range(n)), list(range(n))
    held = list(range(9, n, 10))
    return [i for i in range(n) if i % 10 != 9], held


def step_seed(seed: int, step: int, salt: int = 0) -> int:
    h = hashlib.sha256(f"{seed}:{step}:{salt}".encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def learning_rate(oc, step: int, steps: int) -> float:
    """Learning rate for a 0-based step under the section's schedule."""
    if oc.lr_schedule == "cosine" and steps > 0:
        return 0.5 * oc.lr * (1.0 + math.cos(math.pi * step / steps))
    return oc.lr


def class_frequency_weights(labels: np.ndarray, num_classes: int) -> tuple:
    counts = np.bincount(labels.ravel(), minlength=num_classes).astype(np.float64)
    w = counts.sum() / np.maximum(counts, 1) / num_classes
    return tuple(float(v) for v in w / w.mean())


@torch.no_grad()
def reconstruct(tokenizer: Tokenizer, labels: np.ndarray, batch_size: int = 16) -> np.ndarray:
    tokenizer.eval()
    out = []
    for s in range(0, len(labels), batch_size):
        x = torch.from_numpy(labels[s:s + batch_size].astype(np.int64))
        out.append(tokenizer.reconstruct(x).numpy().astype(np.uint8))
    return np.concatenate(out)


def recon_metrics(tokenizer: Tokenizer, labels: np.ndarray) -> dict:
    pred = reconstruct(tokenizer, labels)
    per_class, miou = metrics.class_miou(pred, labels, tokenizer.cfg.num_classes)
    return {"iou": metrics.occupancy_iou(pred, labels), "miou": miou, "accuracy": metrics.voxel_accuracy(pred, labels),
            "per_class": {int(k): float(v) for k, v in per_class.items()}}


class _CsvLog:
    def __init__(self, path, header, resume: bool):
        self.path = Path(path)
        self.header = header
        if resume and self.path.exists():
            self.f = open(self.path, "a", newline="", encoding="utf-8")
        else:
            self.f = open(self.path, "w", newline="", encoding="utf-8")
            self.f.write(",".join(header) + "\n")
        self.w = csv.writer(self.f, lineterminator="\n")

    def row(self, values: dict):
        self.w.writerow([_fmt(values[k]) for k in self.header])

    def close(self):
        self.f.close()


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def train_tokenizer(cfg: RunConfig, clips: ClipSet, ckpt_path, steps: int | None = None, resume: bool = False,
                    loss_csv=None, on_eval=None, stop_at: int | None = None) -> tuple[Tokenizer, list]:
    """Train (or resume) the tokenizer and write its checkpoint.

    `stop_at` ends the run early at that step while keeping the step budget
    and schedule of `steps`; used to produce mid-run checkpoints.
    """
    oc = cfg.train_tokenizer
    steps = oc.steps if steps is None else steps
    ckpt_path = Path(ckpt_path)
    train_idx, held_idx = split_heldout(len(clips))
    train = torch.from_numpy(clips.labels[train_idx].astype(np.int64))
    start = 0
    if resume and ckpt_path.exists():
        model, opt, meta = load_tokenizer(ckpt_path, opt_lr=oc.lr, weight_decay=oc.weight_decay)
        start = int(meta["step"])
        log.info("resuming tokenizer from step %d", start)
    else:
        weights = None
        if cfg.tokenizer.inverse_frequency_weights:
            weights = class_frequency_weights(clips.labels[train_idx], cfg.tokenizer_config().num_classes)
        torch.manual_seed(cfg.seed)
        model = Tokenizer(cfg.tokenizer_config(class_weights=weights))
        opt = make_optimizer(model, oc.lr, oc.weight_decay)
    end = steps if stop_at is None else min(stop_at, steps)
    records = []
    csv_log = _CsvLog(loss_csv, ("step", "recon", "codebook", "commit", "total"), resume and start > 0) if loss_csv else None
    try:
        for step in range(start, end):
            gen = torch.Generator().manual_seed(step_seed(cfg.seed, step))
            idx = torch.randint(len(train), (min(oc.batch_size, max(len(train), 1)),), generator=gen)
            torch.manual_seed(step_seed(cfg.seed, step, 1))
            try:
                rec = tokenizer_train_step(model, opt, train[idx], lr=learning_rate(oc, step, steps))
            except NonFiniteError as e:
                raise NonFiniteError(f"tokenizer training aborted at step {step}: {e}") from e
            rec["step"] = step
            records.append(rec)
            if csv_log:
                csv_log.row(rec)
            if oc.eval_interval and ((step + 1) % oc.eval_interval == 0 or step + 1 == end):
                m = recon_metrics(model, clips.labels[held_idx])
                log.info("tokenizer step %d loss %.4f heldout iou %.4f miou %.4f acc %.4f",
                         step + 1, rec["total"], m["iou"], m["miou"], m["accuracy"])
                if on_eval:
                    on_eval(step + 1, m)
            if oc.checkpoint_interval and (step + 1) % oc.checkpoint_interval == 0:
                save_tokenizer(ckpt_path, model, opt, step + 1)
    finally:
        if csv_log:
            csv_log.close()
    save_tokenizer(ckpt_path, model, opt, end, extra={"config_hash": tokenizer_hash(cfg)})
    return model, records


def tokenizer_hash(cfg: RunConfig) -> str:
    return cfg.section_hash("world", "tokenizer")


@torch.no_grad()
def encode_tokens(tokenizer: Tokenizer, labels: np.ndarray, batch_size: int = 16) -> torch.Tensor:
    """Quantized token values (N, c, t', h', w') for a stack of clips."""
    tokenizer.eval()
    out = []
    for s in range(0, len(labels), batch_size):
        latent = tokenizer.encode(torch.from_numpy(labels[s:s + batch_size].astype(np.int64)))
        values, _, _ = quantize_latent(latent, tokenizer.codebook.codes)
        out.append(values)
    return torch.cat(out)


def cached_tokens(tokenizer: Tokenizer, clips: ClipSet, cache_path, key: str) -> torch.Tensor:
    """Encode the dataset once; reuse the cache while `key` matches."""
    cache_path = Path(cache_path)
    if cache_path.exists():
        try:
            tensors, meta = checkpoint.load_tensors(cache_path, TOKEN_CACHE_MAGIC)
            if meta.get("key") == key:
                log.info("reusing token cache %s", cache_path)
                return tensors["tokens"]
        except checkpoint.CheckpointError:
            pass
    tokens = encode_tokens(tokenizer, clips.labels)
    checkpoint.save_tensors(cache_path, TOKEN_CACHE_MAGIC, {"tokens": tokens}, {"key": key})
    return tokens


def train_diffusion(cfg: RunConfig, tokens: torch.Tensor, trajs: np.ndarray, ckpt_path, steps: int | None = None,
                    resume: bool = False, loss_csv=None, extra_meta: dict | None = None,
                    stop_at: int | None = None) -> tuple[Denoiser, list]:
    oc = cfg.train_diffusion
    steps = oc.steps if steps is None else steps
    ckpt_path = Path(ckpt_path)
    schedule = DiffusionSchedule.linear(cfg.schedule.train_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
    start = 0
    if resume and ckpt_path.exists():
        model, opt, meta, _ = load_denoiser(ckpt_path, opt_lr=oc.lr, weight_decay=oc.weight_decay)
        start = int(meta["step"])
    else:
        torch.manual_seed(cfg.seed)
        model = Denoiser(cfg.diffusion_config())
        model.token_scale.fill_(float(tokens.float().std()))
        opt = torch.optim.AdamW(model.parameters(), lr=oc.lr, weight_decay=oc.weight_decay)
    x_all = flatten_tokens(tokens.float()) / model.token_scale
    traj_all = torch.from_numpy(np.asarray(trajs, dtype=np.float32))
    simple_steps = round(oc.simple_fraction * steps) if model.cfg.learn_sigma else steps
    end = steps if stop_at is None else min(stop_at, steps)
    records = []
    csv_log = _CsvLog(loss_csv, ("step", "stage", "l_simple", "l_vlb", "total"), resume and start > 0) if loss_csv else None
    try:
        for step in range(start, end):
            gen = torch.Generator().manual_seed(step_seed(cfg.seed, step, 2))
            idx = torch.randint(len(x_all), (oc.batch_size,), generator=gen)
            stage = "simple" if step < simple_steps else "full"
            try:
                rec = diffusion_train_step(model, opt, x_all[idx], traj_all[idx], schedule, stage, oc.vlb_weight, gen,
                                           lr=learning_rate(oc, step, steps))
            except NonFiniteError as e:
                raise NonFiniteError(f"diffusion training aborted at step {step}: {e}") from e
            rec["step"] = step
            records.append(rec)
            if csv_log:
                csv_log.row(rec)
            if oc.eval_interval and (step + 1) % oc.eval_interval == 0:
                window = records[-oc.eval_interval:]
                log.info("diffusion step %d stage %s l_simple %.4f", step + 1, stage,
                         float(np.mean([r["l_simple"] for r in window])))
            if oc.checkpoint_interval and (step + 1) % oc.checkpoint_interval == 0:
                save_denoiser(ckpt_path, model, opt, step + 1, extra=extra_meta)
    finally:
        if csv_log:
            csv_log.close()
    save_denoiser(ckpt_path, model, opt, end, extra=extra_meta)
    return model, records


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
