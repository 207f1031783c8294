"""Checkpoint files: 8-byte length, JSON header, raw little-endian float64 payload.

The header carries the encoder config, free-form metadata, optimizer
hyperparameters and a manifest ``[{name, shape, offset, nbytes}]`` whose
offsets are relative to the first payload byte, in manifest order. Adam moment
buffers are stored as extra entries named ``opt.m.<param>`` / ``opt.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, SharedParams
from .optim import Adam
from .tensor import Tensor

MAGIC = "semvlp-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, params: SharedParams, optimizer: Adam | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffers: list[tuple[str, np.ndarray]] = [(n, t.data) for n, t in params.items()]
    if optimizer is not None:
        buffers += [(f"opt.m.{n}", a) for n, a in optimizer.m.items()]
        buffers += [(f"opt.v.{n}", a) for n, a in optimizer.v.items()]
    manifest, offset = [], 0
    for name, arr in buffers:
        nbytes = arr.size * 8
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "init_seed": params.seed,
        "optimizer": optimizer.hyper() if optimizer is not None else None,
        "meta": meta or {},
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in buffers:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)
    return path


def _split(raw: bytes, path) -> tuple[dict, memoryview]:
    try:
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, memoryview(raw)[8 + n:]


def read_header(path: str | Path) -> dict:
    with Path(path).open("rb") as fh:
        head = fh.read(8)
        n = struct.unpack("<Q", head)[0] if len(head) == 8 else 0
        return _split(head + fh.read(n), path)[0]


def load_checkpoint(path: str | Path) -> tuple[SharedParams, Adam | None, dict]:
    header, payload = _split(Path(path).read_bytes(), path)
    arrays = {}
    for entry in header["manifest"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(payload[lo:hi], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    config = EncoderConfig(**header["config"])
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items() if not k.startswith("opt.")}
    params = SharedParams(config, tensors, header.get("init_seed", 0))
    optimizer = None
    if header.get("optimizer"):
        hyper = dict(header["optimizer"])
        optimizer = Adam(**hyper)
        optimizer.m = {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")}
        optimizer.v = {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")}
    return params, optimizer, header.get("meta", {})
