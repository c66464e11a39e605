"""Checkpoint container: magic, JSON header, float32 payload."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PT3DCKPT"


def encode_checkpoint(state: dict, config: dict, extra: dict | None = None) -> bytes:
    """Serialize a state dict (float tensors stored as float32, integer buffers as int64)."""
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        t = state[name].detach().cpu()
        arr = t.numpy().astype("<f4" if t.is_floating_point() else "<i8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config, "params": entries, "extra": extra or {}}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_checkpoint(data: bytes):
    """Inverse of encode_checkpoint.

    Returns:
        (state dict of tensors, config dict, extra dict)
    """
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint")
    (n,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + n])
    payload = memoryview(data)[start + n:]
    state = {}
    for e in header["params"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + count * dt.itemsize
        if end > len(payload):
            raise ValueError(f"truncated checkpoint at parameter {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype=dt).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return state, header["config"], header["extra"]


def save_checkpoint(path, module: torch.nn.Module, config: dict, extra: dict | None = None) -> str:
    """Write atomically; returns the sha256 content hash."""
    data = encode_checkpoint(module.state_dict(), config, extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path):
    data = Path(path).read_bytes()
    state, config, extra = decode_checkpoint(data)
    extra = dict(extra, sha256=hashlib.sha256(data).hexdigest())
    return state, config, extra


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
