"""Named-tensor container used for tokenizer (OTK1) and denoiser (ODM1) checkpoints.

Layout, little-endian::

    magic (4B) | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_tensors
    then per tensor: u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | data

dtype codes: 0 float32, 1 uint8, 2 int64. Floating tensors are always stored as
float32; meta holds the config and any scalar bookkeeping.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    if arr.dtype == np.uint8:
        return 1
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return 2
    return 0


def save_tensors(path, magic: bytes, tensors: dict, meta: dict) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [magic, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        code = _code(arr)
        arr = np.asarray(arr, dtype=_DTYPES[code], order="C")  # keeps 0-d shapes
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack(f"<BB{arr.ndim}I", code, arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_tensors(path, magic: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != magic:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {magic!r}")
    try:
        version, meta_len = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(data[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        tensors = {}
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + nl].decode("utf-8")
            off += 2 + nl
            code, ndim = struct.unpack_from("<BB", data, off)
            shape = struct.unpack_from(f"<{ndim}I", data, off + 2)
            off += 2 + 4 * ndim
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(shape)
            off += count * dt.itemsize
            tensors[name] = torch.from_numpy(arr.astype(dt.newbyteorder("=")))
    except (struct.error, ValueError, KeyError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if off != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return tensors, meta


def optimizer_tensors(opt: torch.optim.Optimizer, names: list[str], prefix: str = "optim/") -> dict:
    """Flatten AdamW state into named tensors keyed by parameter name."""
    state = opt.state_dict()["state"]
    out = {}
    for i, name in enumerate(names):
        for k, v in state.get(i, {}).items():
            out[f"{prefix}{name}/{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    return out


def restore_optimizer(opt: torch.optim.Optimizer, names: list[str], tensors: dict, prefix: str = "optim/") -> None:
    sd = opt.state_dict()
    state = {}
    for i, name in enumerate(names):
        entry = {}
        for key, t in tensors.items():
            if key.startswith(f"{prefix}{name}/"):
                entry[key[len(prefix) + len(name) + 1:]] = t.clone()
        if entry:
            state[i] = entry
    sd["state"] = state
    opt.load_state_dict(sd)
