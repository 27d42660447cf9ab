"""Versioned binary checkpoints.

Layout::

    magic      8 bytes   b"FRCKPT\\x00\\x01"
    version    uint32 LE
    header_len uint64 LE
    header     UTF-8 JSON: kind, step, config, codebook_trainable, extra,
               tensors: [{name, shape, dtype, offset, nbytes}, ...]
    payload    concatenated raw little-endian tensor data (offsets relative
               to the payload start)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"FRCKPT\x00\x01"
FORMAT_VERSION = 1
_DTYPES = {"f64": "<f8", "f32": "<f4", "i64": "<i8"}
_NAMES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str  # "rohqd" or "restorer"
    config: dict
    tensors: dict[str, np.ndarray]
    step: int = 0
    codebook_trainable: bool = False
    extra: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def state_dict(self, prefix: str = "") -> dict[str, torch.Tensor]:
        return {
            k[len(prefix) :]: torch.from_numpy(v.copy())
            for k, v in self.tensors.items()
            if k.startswith(prefix)
        }


def tensors_from_module(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        tname = _NAMES.get(arr.dtype.newbyteorder("="))
        if tname is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tname]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tname, "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "kind": ckpt.kind,
        "step": ckpt.step,
        "codebook_trainable": ckpt.codebook_trainable,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    payload = memoryview(raw)[pos + hlen :]
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        tensors[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return Checkpoint(
        kind=header["kind"],
        config=header["config"],
        tensors=tensors,
        step=header["step"],
        codebook_trainable=header["codebook_trainable"],
        extra=header.get("extra", {}),
        version=version,
    )
