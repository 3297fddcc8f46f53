"""Checkpoint container.

Layout::

    8 bytes   magic b"CMKDCKPT"
    uint32    format version (LE)
    uint64    header length in bytes (LE)
    header    UTF-8 JSON: {"metadata": {...}, "tensors": [{"name", "shape", "offset"}]}
    payload   concatenated little-endian float32 tensors

Offsets are relative to the start of the payload. Integer buffers (e.g.
BatchNorm step counters) are stored as float32 and cast back on load.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CMKDCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    epoch: int = 0
    val_metric: float = float("nan")
    config_hash: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, **meta) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(params, **meta)

    def load_into(self, model):
        state = model.state_dict()
        missing = set(state) ^ set(self.params)
        if missing:
            raise ValueError(f"checkpoint and model disagree on parameters: {sorted(missing)[:5]}")
        model.load_state_dict({k: torch.from_numpy(np.asarray(v)).to(state[k].dtype)
                               for k, v in self.params.items()})
        return model

    @property
    def metadata(self) -> dict:
        return {"epoch": self.epoch, "val_metric": self.val_metric,
                "config_hash": self.config_hash, "seed": self.seed, **self.extra}


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"metadata": ckpt.metadata, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len))
        payload = fh.read()
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    meta = dict(header["metadata"])
    core = {k: meta.pop(k) for k in ("epoch", "val_metric", "config_hash", "seed")}
    return Checkpoint(params, extra=meta, **core)
