"""Voxel discriminator scoring a (C+1)-channel volume as real or fake."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import DDRBlock, init_uniform_
from .voxel_data import IGNORE

log = logging.getLogger(__name__)

STRIDES = (2, 2, 3, 1)


class DiscScore(NamedTuple):
    prob: torch.Tensor
    logit: torch.Tensor

    @classmethod
    def from_logit(cls, logit):
        return cls(torch.sigmoid(logit), logit)

    @classmethod
    def from_prob(cls, prob):
        prob = torch.as_tensor(prob)
        return cls(prob, torch.log(prob) - torch.log1p(-prob))


def labels_to_simplex(labels, num_classes: int) -> torch.Tensor:
    """One-hot encode label grids (..., G_x, G_y, G_z) -> (..., C+1, G_x, G_y, G_z).

    Ignored voxels are encoded as empty.
    """
    y = labels.long() if torch.is_tensor(labels) else torch.from_numpy(np.array(labels, dtype=np.int64))
    bad = (y < 0) | ((y > num_classes) & (y != IGNORE))
    if bool(bad.any()):
        raise ValueError(f"labels outside 0..{num_classes} (and not {IGNORE})")
    y = torch.where(y == IGNORE, torch.zeros_like(y), y)
    onehot = F.one_hot(y, num_classes + 1).to(torch.float32)
    return onehot.movedim(-1, -4)


def adapted_strides(dims, strides=STRIDES):
    """Per-layer strides for ``dims``; a stride that does not divide every
    current dimension is replaced by 1. Returns (strides, final dims)."""
    cur = list(dims)
    out = []
    for s in strides:
        if s > 1 and any(d % s for d in cur):
            if s == 2:
                raise ValueError(f"grid dims {tuple(dims)} incompatible with discriminator stride chain")
            s = 1
        out.append(s)
        cur = [d // s for d in cur]
    return tuple(out), tuple(cur)


@dataclass(frozen=True)
class DiscConfig:
    num_classes: int = 11
    dims: Tuple[int, int, int] = (20, 12, 20)
    widths: Tuple[int, ...] = (16, 32, 32, 32)
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "widths", tuple(self.widths))
        if len(self.widths) != len(STRIDES):
            raise ValueError("need one width per DDR layer")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Discriminator(nn.Module):
    """Four DDR layers -> flatten -> linear -> ReLU -> linear.

    ``forward`` returns the pre-sigmoid logit, one per input volume.
    """

    def __init__(self, cfg: DiscConfig = DiscConfig(), debug: bool = False):
        super().__init__()
        self.cfg = cfg
        self.debug = debug
        self.strides, final = adapted_strides(cfg.dims)
        if self.strides != STRIDES:
            log.info("discriminator strides adapted to %s for dims %s", self.strides, cfg.dims)
        layers, c = [], cfg.num_classes + 1
        for w, s in zip(cfg.widths, self.strides):
            layers.append(DDRBlock(c, w, stride=s))
            c = w
        self.body = nn.Sequential(*layers)
        self.fc1 = nn.Linear(c * int(np.prod(final)), cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, 1)
        init_uniform_(self, cfg.seed)

    def manifest(self):
        return {"strides": list(self.strides), **self.cfg.to_dict()}

    def forward(self, x):
        if x.shape[-4:] != (self.cfg.num_classes + 1, *self.cfg.dims):
            raise ValueError(f"input shape {tuple(x.shape)} does not match discriminator config")
        if self.debug:
            sums = x.sum(dim=-4)
            if bool((x < 0).any()) or float((sums - 1).abs().max()) > 1e-4:
                raise ValueError("discriminator input is not a per-voxel probability simplex")
        h = self.body(x).flatten(1)
        return self.fc2(F.relu(self.fc1(h))).squeeze(-1)

    def score(self, x) -> DiscScore:
        return DiscScore.from_logit(self(x))
