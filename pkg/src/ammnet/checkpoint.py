"""AMMC checkpoint files.

Layout: b"AMMC", u8 version, three zero bytes, u32 manifest length N, N bytes
of UTF-8 JSON manifest, then the f32 little-endian payload. The manifest
holds ``entries`` (name, shape, offset, nbytes; offsets relative to the
payload start) and a free-form ``meta`` object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"AMMC"
VERSION = 1
_HEAD = struct.Struct("<4sB3xI")


class CheckpointError(ValueError):
    pass


def collect_state(modules: Mapping[str, nn.Module]) -> Dict[str, torch.Tensor]:
    """Parameters of several modules, namespaced as ``prefix/param.name``."""
    out = {}
    for prefix, module in modules.items():
        for name, t in module.state_dict().items():
            out[f"{prefix}/{name}"] = t
    return out


def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta=None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_HEAD.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(chunks))


def load_checkpoint(path):
    """Returns (``{name: float32 tensor}``, meta)."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise CheckpointError("truncated header")
    magic, version, n = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    start = _HEAD.size + n
    if len(buf) < start:
        raise CheckpointError("truncated manifest")
    manifest = json.loads(buf[_HEAD.size:start].decode())
    tensors = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["nbytes"] != 4 * count or start + e["offset"] + e["nbytes"] > len(buf):
            raise CheckpointError(f"entry {e['name']} is inconsistent or truncated")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=start + e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return tensors, manifest.get("meta", {})


def load_into(module: nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str, strict=True):
    """Copy ``prefix/...`` entries into ``module``, validating every shape.

    With ``strict`` every module parameter must be present. Returns the list
    of loaded parameter names.
    """
    own = module.state_dict()
    loaded = []
    for name, t in own.items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            if strict:
                raise CheckpointError(f"missing parameter {key}")
            continue
        if tuple(tensors[key].shape) != tuple(t.shape):
            raise CheckpointError(f"shape mismatch for {key}: {tuple(tensors[key].shape)} vs {tuple(t.shape)}")
        loaded.append(name)
    with torch.no_grad():
        for name in loaded:
            own[name].copy_(tensors[f"{prefix}/{name}"].to(own[name].dtype))
    return loaded
