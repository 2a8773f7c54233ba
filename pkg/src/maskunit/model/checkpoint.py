"""Versioned binary checkpoints: config blob, step counter, named float32 tensors."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from maskunit.model.config import ModelConfig
from maskunit.model.network import MaskedPredictionNet

MAGIC = b"MUCK"
VERSION = 1


def save_checkpoint(path, model: MaskedPredictionNet, step=0):
    cfg = model.cfg.to_json().encode()
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg,
             struct.pack("<QI", int(step), len(state))]
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        bname = name.encode()
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(model, step)``; the model is in eval mode."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    version, cfg_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_json(blob[off:off + cfg_len].decode())
    off += cfg_len
    step, n = struct.unpack_from("<QI", blob, off)
    off += 12
    state = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        state[name] = torch.from_numpy(arr.copy())
    model = MaskedPredictionNet(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, step
