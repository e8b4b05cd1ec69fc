"""The voxel predictor: RGB encoder, TSDF encoder, fusion and 3D decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import MODULATION_VARIANTS, DDRBlock, Modulation, fuse_add, init_uniform_
from .voxel_data import scatter_features

SITES = ("m1", "m2", "m3")
FUSION_MODES = ("modulation", "addition")


@dataclass(frozen=True)
class GeneratorConfig:
    channels: int = 16
    dims: Tuple[int, int, int] = (20, 12, 20)
    num_classes: int = 11
    image_size: Tuple[int, int] = (64, 64)  # (H, W)
    fusion_mode: str = "modulation"
    sites: Tuple[str, ...] = SITES
    m1_variant: str = "full"
    modalities: Tuple[str, ...] = ("rgb", "tsdf")
    rgb_widths: Tuple[int, ...] = (8, 16, 32, 32)
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "image_size", "sites", "modalities", "rgb_widths"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if set(self.sites) - set(SITES):
            raise ValueError(f"unknown modulation sites {self.sites}")
        if self.m1_variant not in MODULATION_VARIANTS:
            raise ValueError(f"unknown m1_variant {self.m1_variant!r}")
        if not self.modalities or set(self.modalities) - {"rgb", "tsdf"}:
            raise ValueError(f"bad modalities {self.modalities}")
        if (self.fusion_mode == "modulation") != bool(self.sites):
            raise ValueError("modulation sites must be non-empty exactly when fusion_mode='modulation'")
        if self.sites and len(self.modalities) != 2:
            raise ValueError("modulation needs both modalities")
        if any(d % 4 for d in self.dims):
            raise ValueError(f"grid dims {self.dims} must be divisible by 4")
        h, w = self.image_size
        if h % 16 or w % 16:
            raise ValueError("image size must be divisible by 16")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class RGBEncoder(nn.Module):
    """Four stride-2 conv stages; a pointwise projection of each stage is
    resampled to 1/4 resolution and summed into the D-channel feature map."""

    def __init__(self, channels, num_classes, widths=(8, 16, 32, 32)):
        super().__init__()
        stages, c = [], 3
        for w in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(c, w, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(w, w, 3, padding=1), nn.ReLU(),
            ))
            c = w
        self.stages = nn.ModuleList(stages)
        self.proj = nn.ModuleList(nn.Conv2d(w, channels, 1) for w in widths)
        self.seg_head = nn.Conv2d(channels, num_classes + 1, 1)

    def forward(self, rgb):
        feats, h = [], rgb
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        size = (rgb.shape[-2] // 4, rgb.shape[-1] // 4)
        f = sum(F.interpolate(p(x), size=size, mode="nearest") for p, x in zip(self.proj, feats))
        f = F.relu(f)
        return f, self.seg_head(f)


class TSDFEncoder(nn.Module):
    def __init__(self, channels):
        super().__init__()
        half = max(channels // 2, 4)
        self.conv1 = nn.Conv3d(1, half, 3, padding=1)
        self.conv2 = nn.Conv3d(half, channels, 3, stride=2, padding=1)
        self.conv3 = nn.Conv3d(channels, channels, 3, padding=1)
        self.ddr1 = DDRBlock(channels, channels)
        self.ddr2 = DDRBlock(channels, channels, dilation=2)
        # the bottleneck stays at half resolution; objects are a few voxels wide
        self.deconv1 = nn.ConvTranspose3d(channels, channels, 3, padding=1)
        self.deconv2 = nn.ConvTranspose3d(channels, channels, 2, stride=2)

    def forward(self, tsdf):
        h = F.relu(self.conv1(tsdf))
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        h = self.ddr2(self.ddr1(h))
        h = F.relu(self.deconv1(h))
        return F.relu(self.deconv2(h))


class Decoder(nn.Module):
    """Two strided DDR stages down to 1/4 resolution and two transposed
    convolutions back up, with skips at 1/2 and full resolution. Sites ``m2`` and
    ``m3`` modulate the two up-sampled features with the TSDF features."""

    def __init__(self, channels, num_classes, sites=()):
        super().__init__()
        c = channels
        self.sites = tuple(s for s in sites if s in ("m2", "m3"))
        self.enc1 = DDRBlock(c, c, stride=2)
        self.enc2 = DDRBlock(c, c, stride=2)
        self.mid = DDRBlock(c, c, dilation=2)
        self.up1 = nn.ConvTranspose3d(c, c, 2, stride=2)
        self.up2 = nn.ConvTranspose3d(c, c, 2, stride=2)
        self.classifier = nn.Conv3d(c, num_classes + 1, 1)
        if self.sites:
            self.downscale = nn.Conv3d(c, c, 3, stride=2, padding=1)
        if "m2" in self.sites:
            self.mod2 = Modulation(c)
        if "m3" in self.sites:
            self.upscale = nn.ConvTranspose3d(c, c, 2, stride=2)
            self.mod3 = Modulation(c)

    def forward(self, x, v_t=None):
        if self.sites and v_t is None:
            raise ValueError("decoder modulation needs the TSDF features")
        s1 = self.enc1(x)
        h = self.mid(self.enc2(s1))
        h = F.relu(self.up1(h)) + s1
        if self.sites:
            v_half = F.relu(self.downscale(v_t))
            if "m2" in self.sites:
                h = self.mod2(h, v_half)
        h = F.relu(self.up2(h)) + x
        if "m3" in self.sites:
            h = self.mod3(h, F.relu(self.upscale(v_half)))
        return self.classifier(h)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.cfg = cfg
        D, C = cfg.channels, cfg.num_classes
        self.rgb = RGBEncoder(D, C, cfg.rgb_widths) if "rgb" in cfg.modalities else None
        self.tsdf = TSDFEncoder(D) if "tsdf" in cfg.modalities else None
        self.fusion = Modulation(D, cfg.m1_variant) if "m1" in cfg.sites else None
        self.decoder = Decoder(D, C, cfg.sites)
        init_uniform_(self, cfg.seed)

    def encode_rgb(self, rgb):
        """(B, 3, H, W) -> (features (B, D, H/4, W/4), 2D logits (B, C+1, H/4, W/4))."""
        if tuple(rgb.shape[-2:]) != self.cfg.image_size or rgb.shape[-3] != 3:
            raise ValueError(f"rgb shape {tuple(rgb.shape)} does not match image size {self.cfg.image_size}")
        return self.rgb(rgb)

    def encode_tsdf(self, tsdf):
        """(B, G_x, G_y, G_z) -> (B, D, G_x, G_y, G_z)."""
        if tuple(tsdf.shape[-3:]) != self.cfg.dims:
            raise ValueError(f"tsdf shape {tuple(tsdf.shape)} does not match dims {self.cfg.dims}")
        return self.tsdf(tsdf.reshape(-1, 1, *self.cfg.dims))

    def project(self, feat2d, pix2vox):
        return scatter_features(feat2d, pix2vox, self.cfg.dims)

    def fuse(self, v_r, v_t):
        if v_r is None:
            return v_t
        if v_t is None:
            return v_r
        if self.fusion is not None:
            return self.fusion(v_r, v_t)
        return fuse_add(v_r, v_t)

    def decode(self, fused, v_t=None):
        return self.decoder(fused, v_t)

    def features(self, rgb, tsdf, pix2vox):
        """Intermediate features: (V_r, V_t, 2D logits); absent branches are None."""
        v_r = logits2d = v_t = None
        if self.rgb is not None:
            feat2d, logits2d = self.encode_rgb(rgb)
            v_r = self.project(feat2d, pix2vox)
        if self.tsdf is not None:
            v_t = self.encode_tsdf(tsdf)
        return v_r, v_t, logits2d

    def forward(self, rgb, tsdf, pix2vox) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        v_r, v_t, logits2d = self.features(rgb, tsdf, pix2vox)
        return self.decode(self.fuse(v_r, v_t), v_t), logits2d
