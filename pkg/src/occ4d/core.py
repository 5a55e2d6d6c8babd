"""Occupancy grid data model, class vocabularies, the OCCV clip format and BEV rendering."""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OCCV_MAGIC = b"OCCV"
OCCV_VERSION = 1
_HEADER = struct.Struct("<4s6I")
BACKGROUND_RGB = (128, 128, 128)


class ClipFormatError(ValueError):
    """Raised for malformed OCCV files."""


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple[str, ...]
    palette: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "palette", tuple(tuple(int(v) for v in c) for c in self.palette))
        if not self.names or self.names[0] != "empty":
            raise ValueError("class 0 must be 'empty'")
        if len(self.palette) != len(self.names):
            raise ValueError("palette length must equal names length")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        for rgb in self.palette:
            if len(rgb) != 3 or any(not 0 <= v <= 255 for v in rgb):
                raise ValueError(f"bad palette entry {rgb}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


# Colors follow the nuScenes-occupancy legend.
NUSCENES_VOCAB = ClassVocabulary(
    names=(
        "empty", "others", "barrier", "bicycle", "bus", "car", "construction_vehicle",
        "motorcycle", "pedestrian", "traffic_cone", "trailer", "truck",
        "driveable_surface", "other_flat", "sidewalk", "terrain", "manmade", "vegetation",
    ),
    palette=(
        (0, 0, 0), (0, 0, 0), (255, 120, 50), (255, 192, 203), (252, 254, 88),
        (87, 149, 237), (140, 251, 253), (193, 180, 61), (222, 51, 35), (249, 240, 162),
        (120, 64, 21), (145, 52, 231), (226, 59, 246), (138, 137, 137), (65, 10, 72),
        (176, 237, 107), (83, 112, 152), (90, 172, 52),
    ),
)

TOY_VOCAB = ClassVocabulary(
    names=("empty", "road", "sidewalk", "car", "building", "vegetation", "pedestrian", "barrier"),
    palette=(
        (0, 0, 0), (226, 59, 246), (65, 10, 72), (87, 149, 237),
        (83, 112, 152), (90, 172, 52), (222, 51, 35), (255, 120, 50),
    ),
)


def generic_vocab(num_classes: int) -> ClassVocabulary:
    """Placeholder vocabulary for clips whose class count matches no preset."""
    rng = np.random.default_rng(num_classes)
    names = ("empty",) + tuple(f"class_{k}" for k in range(1, num_classes))
    palette = [(0, 0, 0)] + [tuple(int(v) for v in rng.integers(0, 256, 3)) for _ in range(1, num_classes)]
    return ClassVocabulary(names, tuple(palette))


def vocab_for(num_classes: int) -> ClassVocabulary:
    for v in (TOY_VOCAB, NUSCENES_VOCAB):
        if len(v) == num_classes:
            return v
    return generic_vocab(num_classes)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class OccupancySequence:
    """A (T, H, W, D) grid of class labels, stored row-major as uint8."""

    labels: np.ndarray
    vocab: ClassVocabulary = field(default=TOY_VOCAB)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 4 or min(labels.shape) < 1:
            raise ValueError(f"labels must be rank-4 with positive dims, got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.vocab)):
            raise ValueError(f"label out of range for {len(self.vocab)}-class vocabulary")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(s) for s in self.labels.shape)

    @property
    def T(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, OccupancySequence):
            return NotImplemented
        return self.vocab == other.vocab and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class Trajectory:
    """Ego positions (x, y) in meters, one per frame. Stored as float32."""

    positions: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float32)
        if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 1:
            raise ValueError(f"positions must have shape (T, 2), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("trajectory coordinates must be finite")
        object.__setattr__(self, "positions", _frozen(p))

    def __len__(self):
        return self.positions.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return np.array_equal(self.positions, other.positions)

    __hash__ = None


def clip_bytes(seq: OccupancySequence, traj: Trajectory) -> bytes:
    if len(traj) != seq.T:
        raise ValueError(f"trajectory length {len(traj)} does not match T={seq.T}")
    T, H, W, D = seq.dims
    header = _HEADER.pack(OCCV_MAGIC, OCCV_VERSION, T, H, W, D, len(seq.vocab))
    return header + seq.labels.tobytes(order="C") + traj.positions.astype("<f4").tobytes(order="C")


def write_clip(seq: OccupancySequence, traj: Trajectory, path) -> None:
    data = clip_bytes(seq, traj)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def parse_clip(data: bytes, vocab: ClassVocabulary | None = None) -> tuple[OccupancySequence, Trajectory]:
    if len(data) < _HEADER.size:
        raise ClipFormatError("truncated header")
    magic, version, T, H, W, D, num_classes = _HEADER.unpack_from(data)
    if magic != OCCV_MAGIC:
        raise ClipFormatError(f"bad magic {magic!r}")
    if version != OCCV_VERSION:
        raise ClipFormatError(f"unsupported version {version}")
    if min(T, H, W, D) < 1 or num_classes < 1:
        raise ClipFormatError("non-positive dimension in header")
    n = T * H * W * D
    expected = _HEADER.size + n + 8 * T
    if len(data) < expected:
        raise ClipFormatError(f"truncated payload: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise ClipFormatError(f"trailing bytes: {len(data)} bytes, expected {expected}")
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size).reshape(T, H, W, D)
    if labels.max() >= num_classes:
        raise ClipFormatError(f"label {labels.max()} >= declared class count {num_classes}")
    if vocab is None:
        vocab = vocab_for(num_classes)
    elif len(vocab) != num_classes:
        raise ClipFormatError(f"file declares {num_classes} classes, vocabulary has {len(vocab)}")
    pos = np.frombuffer(data, dtype="<f4", count=2 * T, offset=_HEADER.size + n).reshape(T, 2)
    return OccupancySequence(labels, vocab), Trajectory(pos)


def read_clip(path, vocab: ClassVocabulary | None = None) -> tuple[OccupancySequence, Trajectory]:
    with open(path, "rb") as f:
        return parse_clip(f.read(), vocab)


def top_labels(labels: np.ndarray) -> np.ndarray:
    """Highest non-empty label along the last (height) axis, 0 where the column is empty."""
    occ = labels != 0
    depth = labels.shape[-1]
    # index of the topmost occupied cell, scanning from d = D-1 down
    top = depth - 1 - np.argmax(occ[..., ::-1], axis=-1)
    out = np.take_along_axis(labels, top[..., None], axis=-1)[..., 0]
    return np.where(occ.any(axis=-1), out, 0)


def render_bev(seq: OccupancySequence, frame: int) -> np.ndarray:
    """Top-down RGB image (H, W, 3) of one frame; empty columns are gray."""
    if not 0 <= frame < seq.T:
        raise IndexError(f"frame {frame} out of range for T={seq.T}")
    top = top_labels(seq.labels[frame])
    palette = np.array(seq.vocab.palette, dtype=np.uint8)
    img = palette[top]
    img[top == 0] = BACKGROUND_RGB
    return img


def write_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=m.end()).reshape(h, w, 3)


def render_clip(seq: OccupancySequence, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in range(seq.T):
        p = out_dir / f"frame_{t:04}.ppm"
        write_ppm(render_bev(seq, t), p)
        paths.append(p)
    return paths
