"""Binary voxel-grid files and scene bundle directories.

Grid file layout (little-endian)::

    0-3   magic b"AMMV"
    4     version (1)
    5     dtype: 0 = u8 labels, 1 = f32
    6-7   zero
    8-19  three u32 dims (G_x, G_y, G_z)
    20-   payload, x-major with z fastest: ((x * G_y + y) * G_z + z)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .voxel_data import (
    CameraIntrinsics,
    GridSpec,
    Scene,
    compute_eval_mask,
)

MAGIC = b"AMMV"
VERSION = 1
HEADER = struct.Struct("<4sBBxx3I")
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}


class GridFormatError(ValueError):
    code = "format"


class BadMagicError(GridFormatError):
    code = "bad_magic"


class BadVersionError(GridFormatError):
    code = "bad_version"


class BadDtypeError(GridFormatError):
    code = "bad_dtype"


class TruncatedError(GridFormatError):
    code = "truncated"


def encode_grid(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"grid payload must be 3-D, got shape {values.shape}")
    if values.dtype == np.uint8:
        code = 0
    elif values.dtype == np.float32:
        code = 1
    else:
        raise TypeError(f"unsupported grid dtype {values.dtype}; use uint8 or float32")
    header = HEADER.pack(MAGIC, VERSION, code, *values.shape)
    return header + np.ascontiguousarray(values, dtype=_DTYPES[code]).tobytes()


def decode_grid(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TruncatedError(f"header needs {HEADER.size} bytes, got {len(buf)}")
    magic, version, code, gx, gy, gz = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise BadDtypeError(f"unknown dtype code {code}")
    dtype = _DTYPES[code]
    n = gx * gy * gz * dtype.itemsize
    if len(buf) - HEADER.size < n:
        raise TruncatedError(f"payload needs {n} bytes, got {len(buf) - HEADER.size}")
    arr = np.frombuffer(buf, dtype=dtype, count=gx * gy * gz, offset=HEADER.size)
    return arr.reshape(gx, gy, gz).astype(dtype.newbyteorder("="))


def write_grid(path, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_grid(values))


def read_grid(path) -> np.ndarray:
    return decode_grid(Path(path).read_bytes())


# -- scene bundles ------------------------------------------------------------

def save_scene(scene: Scene, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_grid(d / "gt.ammv", scene.gt.astype(np.uint8))
    write_grid(d / "tsdf.ammv", scene.tsdf.astype(np.float32))
    # image members are stored as (W, H, channels)
    write_grid(d / "depth.ammv", scene.depth.T[..., None].astype(np.float32))
    write_grid(d / "rgb.ammv", scene.rgb.transpose(1, 0, 2).astype(np.float32))
    meta = {
        "intrinsics": scene.intrinsics.to_dict(),
        "grid": scene.grid.to_dict(),
        "seed": scene.seed,
        "num_classes": scene.num_classes,
        "trunc": scene.trunc,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_scene(directory) -> Scene:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    intr = CameraIntrinsics.from_dict(meta["intrinsics"])
    grid = GridSpec.from_dict(meta["grid"])
    depth = read_grid(d / "depth.ammv")[..., 0].T
    rgb = read_grid(d / "rgb.ammv").transpose(1, 0, 2)
    return Scene(
        rgb=rgb,
        depth=depth,
        intrinsics=intr,
        gt=read_grid(d / "gt.ammv"),
        tsdf=read_grid(d / "tsdf.ammv"),
        mask=compute_eval_mask(depth, intr, grid),
        grid=grid,
        num_classes=int(meta["num_classes"]),
        seed=meta.get("seed"),
        trunc=float(meta.get("trunc", 0.0)),
    )


def list_scene_dirs(root) -> list:
    root = Path(root)
    return sorted(p.parent for p in root.rglob("meta.json"))
