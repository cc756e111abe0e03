"""Versioned binary checkpoint: JSON network config + float32 LE tensors.

Layout (all integers little-endian)::

    b"MSDSCKPT"  u32 version
    u32 n  config JSON (n bytes, utf-8)
    u32 n  metadata JSON (n bytes, utf-8)
    u32 count
    count x [u16 n  name | u8 ndim | ndim x u32 dim | prod(dims) x f32]
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .network import MSDSNet, NetworkConfig

MAGIC = b"MSDSCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(net: MSDSNet, meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (_dump_json(net.cfg.to_dict()), _dump_json(meta or {})):
        parts += [struct.pack("<I", len(blob)), blob]
    state = net.state_dict()
    parts.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        key = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes(order="C")]
    return b"".join(parts)


def save_checkpoint(path, net: MSDSNet, meta: dict | None = None) -> str:
    """Write ``net`` to ``path``; returns the sha256 of the file."""
    data = checkpoint_bytes(net, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Return ``(net, meta)``; the network is float32 and in eval mode."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blobs = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        blobs.append(json.loads(r.take(n).decode()))
    cfg = NetworkConfig.from_dict(blobs[0])
    net = MSDSNet(cfg)
    expected = net.state_dict()
    (count,) = r.unpack("<I")
    loaded = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} for this config")
        if tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"tensor {name!r} has shape {shape}, config expects {tuple(expected[name].shape)}")
        loaded[name] = torch.from_numpy(arr.copy()).to(expected[name].dtype)
    missing = set(expected) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    net.load_state_dict(loaded)
    net.eval()
    return net, blobs[1]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
