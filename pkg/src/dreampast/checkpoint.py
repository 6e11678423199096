"""Versioned binary checkpoint container.

Layout: magic ``b"DPST"``, uint32 format version, uint32 header length, a UTF-8
JSON header, then the raw little-endian float32 tensor blobs in header order.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"DPST"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray], header: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header or {})
    head["tensors"] = entries
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(head_bytes)))
    buf.write(head_bytes)
    for raw in blobs:
        buf.write(raw)
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a DPST checkpoint (bad magic)")
    version, head_len = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12 : 12 + head_len].decode("utf-8"))
    base = 12 + head_len
    tensors = {}
    for e in header.pop("tensors"):
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
    return header, tensors


def save(path: str | Path, tensors: Mapping[str, np.ndarray], header: dict | None = None) -> str:
    data = dumps(tensors, header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def state_dict_to_numpy(state: Mapping) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def state_hash(module) -> str:
    """Hash of a torch module's parameters and buffers, as they would be checkpointed."""
    return hashlib.sha256(dumps(state_dict_to_numpy(module.state_dict()))).hexdigest()
