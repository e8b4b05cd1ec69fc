"""Voxel grids, camera geometry and the procedural indoor scene generator.

Coordinate conventions
----------------------
The grid lives in the camera frame: x right, y down, z forward. Voxel
``(i, j, k)`` has its center at ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``.
Depth images store the z coordinate of the observed surface (0 = no return),
and pixel ``(u, v)`` looks along ``((u - cx) / fx, (v - cy) / fy, 1)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

IGNORE = 255

# Unprojected surface points are pushed this fraction of a voxel behind the
# observed depth, so a surface lying on a voxel face lands in the occupied voxel.
SURFACE_BIAS = 1e-3


class MaskState(enum.IntEnum):
    OUTSIDE = 0
    VISIBLE = 1
    OCCLUDED = 2


@dataclass(frozen=True)
class GridSpec:
    dims: Tuple[int, int, int] = (20, 12, 20)
    voxel_size: float = 0.24
    origin: Tuple[float, float, float] = (-2.4, -2.016, 0.5)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 4:
            raise ValueError(f"grid dims must be three integers >= 4, got {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def centered(cls, dims, voxel_size, near=0.5, camera_height=0.7):
        """Grid centered on the optical axis in x, starting ``near`` units in
        front of the camera, with the camera at ``camera_height`` of the grid
        height measured from the floor (bottom layer)."""
        gx, gy, gz = dims
        origin = (-gx * voxel_size / 2.0, -gy * voxel_size * camera_height, near)
        return cls(tuple(dims), voxel_size, origin)

    @property
    def num_voxels(self) -> int:
        gx, gy, gz = self.dims
        return gx * gy * gz

    def voxel_centers(self) -> np.ndarray:
        """(G_x, G_y, G_z, 3) array of voxel centers, float64."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self):
        return {"dims": list(self.dims), "voxel_size": self.voxel_size, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dims"]), float(d["voxel_size"]), tuple(d["origin"]))


DESK_GRID = GridSpec.centered((20, 12, 20), 0.24)
PAPER_GRID = GridSpec.centered((60, 36, 60), 0.08)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 56.0
    fy: float = 56.0
    cx: float = 31.5
    cy: float = 31.5
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) viewing directions with unit z component."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1
        )

    def project(self, points: np.ndarray):
        """Pixel indices (u, v) of camera-frame points and an in-image flag."""
        z = points[..., 2]
        front = z > 0
        safe_z = np.where(front, z, 1.0)
        u = np.floor(self.fx * points[..., 0] / safe_z + self.cx + 0.5).astype(np.int64)
        v = np.floor(self.fy * points[..., 1] / safe_z + self.cy + 0.5).astype(np.int64)
        inside = front & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return u, v, inside

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Scene:
    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, 0 = no return
    intrinsics: CameraIntrinsics
    gt: np.ndarray  # (G_x, G_y, G_z) uint8
    tsdf: np.ndarray  # (G_x, G_y, G_z) float32 in [-1, 1]
    mask: np.ndarray  # (G_x, G_y, G_z) uint8 MaskState
    grid: GridSpec
    num_classes: int
    seed: Optional[int] = None
    trunc: float = field(default=0.0)

    def __post_init__(self):
        for name in ("rgb", "depth", "gt", "tsdf", "mask"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        for name in ("gt", "tsdf", "mask"):
            if getattr(self, name).shape != self.grid.dims:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != grid dims {self.grid.dims}")


def _check_depth(depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics "
                         f"({intr.height}, {intr.width})")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ValueError("depth must be finite and non-negative")
    return depth


def tsdf_from_depth(depth, intr: CameraIntrinsics, grid: GridSpec, trunc: float) -> np.ndarray:
    """Projective TSDF normalized by ``trunc``.

    The signed distance is measured along the camera ray through the voxel
    center: positive between camera and surface, negative behind it. Voxels
    whose ray has no depth return are +1.
    """
    if not trunc > 0:
        raise ValueError("trunc must be positive")
    if trunc < grid.voxel_size:
        raise ValueError("trunc must be at least one voxel")
    depth = _check_depth(depth, intr)
    centers = grid.voxel_centers()
    u, v, inside = intr.project(centers)
    d = np.where(inside, depth[np.clip(v, 0, intr.height - 1), np.clip(u, 0, intr.width - 1)], 0.0)
    hit = inside & (d > 0)
    z = centers[..., 2]
    ray_scale = np.linalg.norm(centers, axis=-1) / np.where(hit, z, 1.0)
    sdf = (d - z) * ray_scale / trunc
    out = np.where(hit, np.clip(sdf, -1.0, 1.0), 1.0)
    return out.astype(np.float32)


def surface_points(depth, intr: CameraIntrinsics, grid: GridSpec):
    """Camera-frame surface points of all pixels with a depth return.

    Returns the (H, W, 3) point array and the (H, W) validity flag.
    """
    depth = _check_depth(depth, intr)
    valid = depth > 0
    bias = SURFACE_BIAS * grid.voxel_size
    pts = intr.ray_directions() * (depth + bias)[..., None]
    return pts, valid


def surface_voxel_index(depth, intr: CameraIntrinsics, grid: GridSpec) -> np.ndarray:
    """(H, W) flat voxel index ``(i * G_y + j) * G_z + k`` of each pixel's
    surface point, -1 for pixels without a return or landing outside the grid."""
    pts, valid = surface_points(depth, intr, grid)
    idx = np.floor((pts - np.asarray(grid.origin)) / grid.voxel_size).astype(np.int64)
    dims = np.asarray(grid.dims)
    in_grid = valid & np.all((idx >= 0) & (idx < dims), axis=-1)
    flat = (idx[..., 0] * dims[1] + idx[..., 1]) * dims[2] + idx[..., 2]
    return np.where(in_grid, flat, -1)


def scatter_features(feat2d: torch.Tensor, pix2vox: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    """Scatter image features into voxel volumes, averaging colliding pixels.

    ``feat2d`` is (B, D, h, w) and ``pix2vox`` (B, H, W) with H, W integer
    multiples of h, w; each full-resolution pixel takes the feature of its
    nearest low-resolution cell. Returns (B, D, G_x, G_y, G_z).
    """
    b, d, h, w = feat2d.shape
    bb, H, W = pix2vox.shape
    if bb != b or H % h or W % w or H // h != W // w:
        raise ValueError(f"feature map {tuple(feat2d.shape)} incompatible with pixel map {tuple(pix2vox.shape)}")
    stride = H // h
    n_vox = int(np.prod(dims))
    rows = torch.arange(H) // stride
    cols = torch.arange(W) // stride
    cell = (rows[:, None] * w + cols[None, :]).reshape(-1)
    batch = torch.arange(b)[:, None]
    src = (batch * (h * w) + cell[None, :]).reshape(-1)
    dst = pix2vox.reshape(b, -1)
    keep = (dst >= 0).reshape(-1)
    dst = (dst + batch * n_vox).reshape(-1)
    src, dst = src[keep], dst[keep]

    flat = feat2d.permute(0, 2, 3, 1).reshape(b * h * w, d)
    out = feat2d.new_zeros(b * n_vox, d).index_add(0, dst, flat[src])
    counts = torch.bincount(dst, minlength=b * n_vox).clamp(min=1).to(feat2d.dtype)
    out = out / counts[:, None]
    return out.reshape(b, *dims, d).permute(0, 4, 1, 2, 3)


def project_2d_to_3d(feat2d: torch.Tensor, depth, intr: CameraIntrinsics, grid: GridSpec) -> torch.Tensor:
    """Map a (D, h, w) feature map onto the visible surface voxels.

    Voxels hit by no pixel are exactly zero. Differentiable w.r.t. ``feat2d``.
    """
    pix2vox = torch.from_numpy(surface_voxel_index(depth, intr, grid))
    return scatter_features(feat2d[None], pix2vox[None], grid.dims)[0]


def compute_eval_mask(depth, intr: CameraIntrinsics, grid: GridSpec) -> np.ndarray:
    depth = _check_depth(depth, intr)
    mask = np.full(grid.dims, MaskState.OUTSIDE, dtype=np.uint8)

    centers = grid.voxel_centers()
    u, v, inside = intr.project(centers)
    d = np.where(inside, depth[np.clip(v, 0, intr.height - 1), np.clip(u, 0, intr.width - 1)], 0.0)
    behind = inside & (d > 0) & (centers[..., 2] > d)
    mask[behind] = MaskState.OCCLUDED

    flat = surface_voxel_index(depth, intr, grid)
    visible = np.unique(flat[flat >= 0])
    mask.reshape(-1)[visible] = MaskState.VISIBLE
    return mask


# -- procedural scenes -------------------------------------------------------

# Fixed base colors per class index; index 0 is the background.
_PALETTE = np.array([
    [0.05, 0.05, 0.05], [0.85, 0.85, 0.80], [0.55, 0.40, 0.25], [0.75, 0.70, 0.60],
    [0.35, 0.60, 0.85], [0.80, 0.25, 0.20], [0.90, 0.80, 0.40], [0.30, 0.65, 0.35],
    [0.60, 0.45, 0.70], [0.15, 0.15, 0.30], [0.95, 0.55, 0.15], [0.50, 0.50, 0.50],
])


def class_color(c: int) -> np.ndarray:
    if c < len(_PALETTE):
        return _PALETTE[c]
    g = np.random.default_rng(1000 + c)
    return g.uniform(0.1, 0.9, size=3)


# Box extents (x, y, z) in voxels per object class. Tying the shape to the
# class makes semantics recoverable from geometry as well as color.
_EXTENTS = {
    1: (2, 1, 2), 4: (3, 6, 1), 5: (2, 4, 2), 6: (6, 2, 5), 7: (6, 3, 3),
    8: (4, 3, 4), 9: (3, 3, 1), 10: (4, 5, 2), 11: (5, 1, 3),
}


def object_extent(c: int):
    if c in _EXTENTS:
        return _EXTENTS[c]
    g = np.random.default_rng(2000 + c)
    return tuple(int(v) for v in g.integers(1, 6, size=3))


def render_depth(boxes_lo: np.ndarray, boxes_hi: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Z-depth of the first intersection of each pixel ray with a union of
    axis-aligned boxes (camera-frame bounds), 0 where nothing is hit."""
    dirs = intr.ray_directions().reshape(-1, 1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = boxes_lo[None] * inv
        t1 = boxes_hi[None] * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
    # zero direction components: inside the slab means unconstrained
    zero = dirs == 0
    inside_slab = (boxes_lo[None] <= 0) & (boxes_hi[None] >= 0)
    tmin = np.where(zero, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside_slab, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    t = np.where(hit, t_near, np.inf).min(axis=-1)
    t = np.where(np.isfinite(t), t, 0.0)
    return t.reshape(intr.height, intr.width)


def gen_synthetic_scene(
    seed: int,
    grid: GridSpec = DESK_GRID,
    num_classes: int = 11,
    intr: Optional[CameraIntrinsics] = None,
    trunc: Optional[float] = None,
) -> Scene:
    """Deterministic toy room: floor, one or two walls and 2-6 boxes."""
    if num_classes < 2:
        raise ValueError("need at least two semantic classes")
    if num_classes >= IGNORE:
        raise ValueError("class count collides with the ignore label")
    gx, gy, gz = grid.dims
    if gx < 6 or gz < 6 or gy < 4:
        raise ValueError(f"grid {grid.dims} too small for floor, wall and boxes")
    intr = intr or CameraIntrinsics()
    trunc = 3 * grid.voxel_size if trunc is None else trunc
    rng = np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)

    floor_cls = min(2, num_classes)
    wall_cls = min(3, num_classes)
    objects = [c for c in range(1, num_classes + 1) if c not in (floor_cls, wall_cls)]
    objects = objects or list(range(1, num_classes + 1))

    # (lo, hi) voxel index boxes, hi exclusive, paired with class labels
    boxes = [((0, gy - 1, 0), (gx, gy, gz), floor_cls),
             ((0, 0, gz - 1), (gx, gy, gz), wall_cls)]
    if rng.random() < 0.5:
        x0 = 0 if rng.random() < 0.5 else gx - 1
        boxes.append(((x0, 0, 0), (x0 + 1, gy, gz), wall_cls))

    n_boxes = int(rng.integers(2, 7))
    z_lo = max(1, gz // 4)
    for _ in range(n_boxes):
        c = int(rng.choice(objects))
        sx, sy, sz = object_extent(c)
        if rng.random() < 0.5:
            sx, sz = sz, sx
        sx, sz = min(sx, gx - 2), min(sz, gz - 1 - z_lo)
        sy = min(sy, gy - 1)
        x0 = int(rng.integers(1, gx - 1 - sx + 1))
        z0 = int(rng.integers(z_lo, gz - 1 - sz + 1))
        y1 = gy - 1
        boxes.append(((x0, y1 - sy, z0), (x0 + sx, y1, z0 + sz), c))
    if all(b[2] == floor_cls for b in boxes[2:]) and wall_cls == floor_cls:
        lo, hi, _ = boxes[-1]
        boxes[-1] = (lo, hi, next(c for c in range(1, num_classes + 1) if c != floor_cls))

    labels = np.zeros(grid.dims, dtype=np.uint8)
    for lo, hi, c in boxes:
        labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = c

    org = np.asarray(grid.origin)
    lo_w = np.array([org + np.asarray(lo) * grid.voxel_size for lo, _, _ in boxes])
    hi_w = np.array([org + np.asarray(hi) * grid.voxel_size for _, hi, _ in boxes])
    depth = render_depth(lo_w, hi_w, intr).astype(np.float32)

    flat = surface_voxel_index(depth, intr, grid)
    surf_cls = np.where(flat >= 0, labels.reshape(-1)[np.clip(flat, 0, None)], 0)
    tint = 1.0 + rng.uniform(-0.08, 0.08, size=3)
    colors = np.stack([class_color(c) for c in range(num_classes + 1)])
    rgb = colors[surf_cls] * tint + rng.normal(0.0, 0.04, size=(intr.height, intr.width, 3))
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)

    tsdf = tsdf_from_depth(depth, intr, grid, trunc)
    mask = compute_eval_mask(depth, intr, grid)
    return Scene(rgb=rgb, depth=depth, intrinsics=intr, gt=labels, tsdf=tsdf, mask=mask,
                 grid=grid, num_classes=num_classes, seed=int(seed), trunc=float(trunc))
