"""Deterministic synthetic driving scenes around a moving ego vehicle.

The world is a straight road running along +x with sidewalks on both sides,
static buildings and vegetation beside the road, and cars driving along the
lanes at constant speed. Each frame is an ego-centric crop: the ego sits at
the grid center and world content is shifted by the ego displacement rounded
to the nearest cell. Grid axes: H runs along world x, W along world y, D is
height above ground (d = 0 is the ground plane).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import TOY_VOCAB, OccupancySequence, Trajectory, write_clip

EMPTY, ROAD, SIDEWALK, CAR, BUILDING, VEGETATION, PEDESTRIAN, BARRIER = range(8)

CAR_SIZE = (4, 2, 1)  # cells along (H, W, D)


@dataclass(frozen=True)
class WorldConfig:
    dims: tuple[int, int, int, int] = (8, 16, 16, 4)
    cell_size: float = 0.5
    n_static_obstacles: int = 20
    n_dynamic_cars: int = 2
    seed: int = 0
    road_half_width: int = 2  # cells either side of the road center line
    dt: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ValueError(f"dims must be 4 positive integers, got {self.dims}")
        if self.dims[0] < 2:
            raise ValueError("T must be at least 2")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        if self.n_static_obstacles < 0 or self.n_dynamic_cars < 0:
            raise ValueError("object counts must be non-negative")


@dataclass(frozen=True)
class TrajectoryKind:
    """One of: straight(speed), turn_right(speed, yaw_rate), motionless, accelerate(a0, rate)."""

    name: str
    speed: float = 0.0
    yaw_rate: float = 0.0
    a0: float = 0.0
    rate: float = 0.0

    NAMES = ("straight", "turn_right", "motionless", "accelerate")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ValueError(f"unknown trajectory kind {self.name!r}")
        for v in (self.speed, self.yaw_rate, self.a0, self.rate):
            if not math.isfinite(v):
                raise ValueError(f"non-finite parameter in {self}")

    @classmethod
    def straight(cls, speed: float):
        return cls("straight", speed=speed)

    @classmethod
    def turn_right(cls, speed: float, yaw_rate: float):
        return cls("turn_right", speed=speed, yaw_rate=yaw_rate)

    @classmethod
    def motionless(cls):
        return cls("motionless")

    @classmethod
    def accelerate(cls, a0: float, rate: float):
        return cls("accelerate", a0=a0, rate=rate)


# 1 cell per frame at the default 0.5 m cells and 0.5 s frames.
DEFAULT_KINDS = {
    "straight": TrajectoryKind.straight(1.0),
    "turn_right": TrajectoryKind.turn_right(1.0, 0.4),
    "motionless": TrajectoryKind.motionless(),
    "accelerate": TrajectoryKind.accelerate(0.25, 0.5),
}


def make_trajectory(kind: TrajectoryKind, T: int, dt: float) -> Trajectory:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not (math.isfinite(dt) and dt > 0):
        raise ValueError("dt must be positive and finite")
    t = np.arange(T, dtype=np.float64) * dt
    if kind.name == "straight":
        pos = np.stack([kind.speed * t, np.zeros_like(t)], axis=1)
    elif kind.name == "motionless":
        pos = np.zeros((T, 2))
    elif kind.name == "accelerate":
        pos = np.stack([kind.a0 * t + 0.5 * kind.rate * t**2, np.zeros_like(t)], axis=1)
    else:
        # constant-speed arc, heading starts along +x and rotates clockwise
        w, v = kind.yaw_rate, kind.speed
        if abs(w) < 1e-12:
            pos = np.stack([v * t, np.zeros_like(t)], axis=1)
        else:
            pos = np.stack([v / w * np.sin(w * t), -v / w * (1.0 - np.cos(w * t))], axis=1)
    return Trajectory(pos)


@dataclass(frozen=True)
class _Box:
    h0: int
    w0: int
    size: tuple[int, int, int]
    label: int
    vh: int = 0  # world-frame velocity in cells per frame along H


def _layout(cfg: WorldConfig, traj: Trajectory, rng: np.random.Generator) -> list[_Box]:
    T, H, W, D = cfg.dims
    shifts = np.rint(traj.positions.astype(np.float64) / cfg.cell_size).astype(int)
    lo_h = int(shifts[:, 0].min()) - H
    hi_h = int(shifts[:, 0].max()) + H
    r = cfg.road_half_width
    side = r + 2  # first cell beyond the sidewalk
    boxes = []
    for _ in range(cfg.n_static_obstacles):
        label = int(rng.choice([BUILDING, VEGETATION, BARRIER, PEDESTRIAN], p=[0.4, 0.35, 0.15, 0.1]))
        sign = 1 if rng.random() < 0.5 else -1
        h0 = int(rng.integers(lo_h, hi_h + 1))
        if label in (BARRIER, PEDESTRIAN):
            # on the sidewalk, one cell wide
            size = (1 if label == PEDESTRIAN else 2, 1, 2 if label == PEDESTRIAN else 1)
            boxes.append(_Box(h0, sign * (r + 1), size, label))
            continue
        if label == BUILDING:
            size = (int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(2, D + 1)))
        else:
            size = (2, 2, int(rng.integers(1, D)) if D > 1 else 1)
        off = int(rng.integers(0, 3))
        w0 = side + off if sign > 0 else -(side + off) - size[1] + 1
        boxes.append(_Box(h0, w0, size, label))
    for _ in range(cfg.n_dynamic_cars):
        lane_w0 = 0 if rng.random() < 0.5 else -2
        vh = int(rng.integers(-1, 2))
        h0 = int(rng.integers(lo_h, hi_h + 1))
        boxes.append(_Box(h0, lane_w0, CAR_SIZE, CAR, vh))
    return boxes


def generate_scene(cfg: WorldConfig, traj: Trajectory) -> OccupancySequence:
    T, H, W, D = cfg.dims
    if len(traj) != T:
        raise ValueError(f"trajectory length {len(traj)} does not match T={T}")
    rng = np.random.default_rng(cfg.seed)
    boxes = _layout(cfg, traj, rng)
    # nearest-cell ego offset; equivalent to carrying the sub-cell residual forward
    shifts = np.rint(traj.positions.astype(np.float64) / cfg.cell_size).astype(int)
    labels = np.zeros((T, H, W, D), dtype=np.uint8)
    r = cfg.road_half_width
    ww = np.arange(W) - W // 2
    for t in range(T):
        ox, oy = shifts[t]
        wy = ww + oy  # world cell along y for each grid column
        ground = np.where(np.abs(wy) <= r, ROAD, np.where(np.abs(wy) <= r + 1, SIDEWALK, EMPTY))
        labels[t, :, :, 0] = ground[None, :]
        for b in boxes:
            # buildings and vegetation start at the ground plane, everything else stands on it
            d0 = 0 if b.label in (BUILDING, VEGETATION) else 1
            h_lo = b.h0 + b.vh * t - ox + H // 2
            w_lo = b.w0 - oy + W // 2
            hs = slice(max(h_lo, 0), min(h_lo + b.size[0], H))
            ws = slice(max(w_lo, 0), min(w_lo + b.size[1], W))
            ds = slice(d0, min(d0 + b.size[2], D))
            if hs.start < hs.stop and ws.start < ws.stop and ds.start < ds.stop:
                labels[t, hs, ws, ds] = b.label
    return OccupancySequence(labels, TOY_VOCAB)


def generate_clip(cfg: WorldConfig, kind: TrajectoryKind) -> tuple[OccupancySequence, Trajectory]:
    traj = make_trajectory(kind, cfg.dims[0], cfg.dt)
    return generate_scene(cfg, traj), traj


def generate_dataset(cfg: WorldConfig, kinds, clips_per_kind: int, out_dir) -> Path:
    """Write `clips_per_kind` clips per kind and a `manifest.csv` (file,kind,seed).

    `kinds` is a list of kind names (looked up in DEFAULT_KINDS) or TrajectoryKind
    values. Clip i gets seed cfg.seed + i.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    i = 0
    for kind in kinds:
        if isinstance(kind, str):
            kind = DEFAULT_KINDS[kind]
        for _ in range(clips_per_kind):
            seed = cfg.seed + i
            seq, traj = generate_clip(replace(cfg, seed=seed), kind)
            name = f"clip_{i:05d}.occv"
            write_clip(seq, traj, out_dir / name)
            rows.append((name, kind.name, seed))
            i += 1
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("file", "kind", "seed"))
        w.writerows(rows)
    return manifest


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return [dict(file=r["file"], kind=r["kind"], seed=int(r["seed"])) for r in csv.DictReader(f)]

