"""Training samples, augmentation and batching."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence

import numpy as np
import torch

from .voxel_data import (
    IGNORE,
    CameraIntrinsics,
    GridSpec,
    Scene,
    gen_synthetic_scene,
    surface_voxel_index,
)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent numpy stream derived from ``seed`` and a stream name."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFF_FFFF_FFFF_FFFF, zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**63 - 1))


def backproject_labels_2d(labels: np.ndarray, pix2vox: np.ndarray) -> np.ndarray:
    """Per-pixel label of the voxel holding that pixel's surface point;
    IGNORE where the pixel has no return (or lands outside the grid)."""
    flat = np.asarray(labels).reshape(-1)
    hit = pix2vox >= 0
    return np.where(hit, flat[np.where(hit, pix2vox, 0)], IGNORE).astype(np.uint8)


def backproject_scene_labels(labels, depth, intr: CameraIntrinsics, grid: GridSpec) -> np.ndarray:
    return backproject_labels_2d(labels, surface_voxel_index(depth, intr, grid))


@dataclass(frozen=True)
class Sample:
    """Network-ready view of a scene. ``pix2vox`` maps each pixel to a flat
    voxel index (-1 for none); augmentation keeps all members coherent."""
    rgb: np.ndarray  # (H, W, 3) float32
    pix2vox: np.ndarray  # (H, W) int64
    gt: np.ndarray  # (G_x, G_y, G_z) uint8
    tsdf: np.ndarray  # (G_x, G_y, G_z) float32
    mask: np.ndarray  # (G_x, G_y, G_z) uint8

    @classmethod
    def from_scene(cls, scene: Scene) -> "Sample":
        return cls(
            rgb=np.array(scene.rgb),
            pix2vox=surface_voxel_index(scene.depth, scene.intrinsics, scene.grid),
            gt=np.array(scene.gt),
            tsdf=np.array(scene.tsdf),
            mask=np.array(scene.mask),
        )

    @property
    def labels_2d(self) -> np.ndarray:
        return backproject_labels_2d(self.gt, self.pix2vox)


def _remap_pix2vox(pix2vox, dims, fn):
    hit = pix2vox >= 0
    i, j, k = np.unravel_index(np.where(hit, pix2vox, 0), dims)
    i, j, k = fn(i, j, k)
    flat = np.ravel_multi_index((i, j, k), dims)
    return np.where(hit, flat, -1)


def flip_x(s: Sample) -> Sample:
    gx = s.gt.shape[0]
    p = _remap_pix2vox(s.pix2vox, s.gt.shape, lambda i, j, k: (gx - 1 - i, j, k))
    return Sample(s.rgb, p, s.gt[::-1].copy(), s.tsdf[::-1].copy(), s.mask[::-1].copy())


def flip_z(s: Sample) -> Sample:
    gz = s.gt.shape[2]
    p = _remap_pix2vox(s.pix2vox, s.gt.shape, lambda i, j, k: (i, j, gz - 1 - k))
    return Sample(s.rgb, p, s.gt[:, :, ::-1].copy(), s.tsdf[:, :, ::-1].copy(), s.mask[:, :, ::-1].copy())


def swap_xz(s: Sample) -> Sample:
    if s.gt.shape[0] != s.gt.shape[2]:
        raise ValueError("x-z permutation needs G_x == G_z")
    p = _remap_pix2vox(s.pix2vox, s.gt.shape, lambda i, j, k: (k, j, i))
    t = (2, 1, 0)
    return Sample(s.rgb, p, s.gt.transpose(t).copy(), s.tsdf.transpose(t).copy(), s.mask.transpose(t).copy())


def flip_image(s: Sample) -> Sample:
    return replace(s, rgb=s.rgb[:, ::-1].copy(), pix2vox=s.pix2vox[:, ::-1].copy())


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Random x/z flips and x-z permutation of the volumes, horizontal image flip.

    Four draws are consumed per call whatever the outcome.
    """
    fx, fz, swap, himg = rng.random(4) < 0.5
    if fx:
        s = flip_x(s)
    if fz:
        s = flip_z(s)
    if swap and s.gt.shape[0] == s.gt.shape[2]:
        s = swap_xz(s)
    if himg:
        s = flip_image(s)
    return s


@dataclass
class Batch:
    rgb: torch.Tensor  # (B, 3, H, W)
    tsdf: torch.Tensor  # (B, G_x, G_y, G_z)
    pix2vox: torch.Tensor  # (B, H, W)
    gt: torch.Tensor  # (B, G_x, G_y, G_z) long
    labels_2d: torch.Tensor  # (B, H, W) long
    mask: torch.Tensor  # (B, G_x, G_y, G_z) uint8
    gt_np: np.ndarray

    def __len__(self):
        return self.rgb.shape[0]


def collate(samples: Sequence[Sample]) -> Batch:
    rgb = np.stack([s.rgb for s in samples]).transpose(0, 3, 1, 2)
    gt = np.stack([s.gt for s in samples])
    return Batch(
        rgb=torch.from_numpy(np.ascontiguousarray(rgb)),
        tsdf=torch.from_numpy(np.stack([s.tsdf for s in samples])),
        pix2vox=torch.from_numpy(np.stack([s.pix2vox for s in samples])),
        gt=torch.from_numpy(gt.astype(np.int64)),
        labels_2d=torch.from_numpy(np.stack([s.labels_2d for s in samples]).astype(np.int64)),
        mask=torch.from_numpy(np.stack([s.mask for s in samples])),
        gt_np=gt,
    )


SPLITS = ("train", "val", "test")


def build_dataset(seed: int, sizes: Dict[str, int], grid: GridSpec, num_classes: int,
                  intr: CameraIntrinsics = None) -> Dict[str, List[Scene]]:
    """Synthetic splits with disjoint scene seeds drawn from the data stream."""
    rng = substream(seed, "data")
    total = sum(sizes.get(k, 0) for k in SPLITS)
    seeds = []
    seen = set()
    while len(seeds) < total:
        s = int(rng.integers(0, 2**63 - 1))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    out, at = {}, 0
    for name in SPLITS:
        n = sizes.get(name, 0)
        out[name] = [gen_synthetic_scene(s, grid, num_classes, intr) for s in seeds[at:at + n]]
        at += n
    return out
