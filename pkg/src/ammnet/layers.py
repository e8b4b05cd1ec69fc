"""Building blocks shared by the generator and the discriminator."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

MODULATION_VARIANTS = ("full", "grad_only", "forward_only")


def init_uniform_(module: nn.Module, seed: int) -> nn.Module:
    """Seeded fan-in scaled uniform init: weights U(-sqrt(3/fan_in), +sqrt(3/fan_in)),
    biases zero. Layers are visited in ``modules()`` order."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.modules.conv._ConvTransposeNd):
                # each output sees in_channels * prod(kernel / stride) inputs
                fan_in = m.weight.shape[0] * math.prod(m.kernel_size) / math.prod(m.stride)
            elif isinstance(m, (nn.modules.conv._ConvNd, nn.Linear)):
                fan_in = m.weight.shape[1] * math.prod(m.weight.shape[2:])
            else:
                continue
            bound = math.sqrt(3.0 / max(fan_in, 1))
            w = m.weight
            w.copy_(torch.rand(w.shape, generator=g, dtype=w.dtype) * 2 * bound - bound)
            if m.bias is not None:
                m.bias.zero_()
    return module


class DDRBlock(nn.Module):
    """Dimensional-decomposition residual block.

    1x1x1 reduce -> 1-D convolutions along x, y, z (each with the given
    dilation, stride applied on its own axis) -> 1x1x1 expand, plus an
    identity or strided 1x1x1 shortcut.
    """

    def __init__(self, c_in, c_out, stride=1, dilation=1, c_mid=None):
        super().__init__()
        c_mid = c_mid or max(c_out // 2, 4)
        d, s = dilation, stride
        self.reduce = nn.Conv3d(c_in, c_mid, 1)
        self.conv_x = nn.Conv3d(c_mid, c_mid, (3, 1, 1), stride=(s, 1, 1), padding=(d, 0, 0), dilation=(d, 1, 1))
        self.conv_y = nn.Conv3d(c_mid, c_mid, (1, 3, 1), stride=(1, s, 1), padding=(0, d, 0), dilation=(1, d, 1))
        self.conv_z = nn.Conv3d(c_mid, c_mid, (1, 1, 3), stride=(1, 1, s), padding=(0, 0, d), dilation=(1, 1, d))
        self.expand = nn.Conv3d(c_mid, c_out, 1)
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv3d(c_in, c_out, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = F.relu(self.reduce(x))
        h = F.relu(self.conv_x(h))
        h = F.relu(self.conv_y(h))
        h = F.relu(self.conv_z(h))
        return F.relu(self.expand(h) + self.shortcut(x))


def modulate(v_r: torch.Tensor, m_s: torch.Tensor, m_b: torch.Tensor) -> torch.Tensor:
    """v_r * (1 + sigmoid(m_s)) + m_b."""
    if not (v_r.shape == m_s.shape == m_b.shape):
        raise ValueError(f"shape mismatch: {tuple(v_r.shape)}, {tuple(m_s.shape)}, {tuple(m_b.shape)}")
    return v_r * (1 + torch.sigmoid(m_s)) + m_b


def fuse_add(v_r: torch.Tensor, v_t: torch.Tensor) -> torch.Tensor:
    if v_r.shape != v_t.shape:
        raise ValueError(f"shape mismatch: {tuple(v_r.shape)} vs {tuple(v_t.shape)}")
    return v_r + v_t


def modulation_grad_identity(grad_out: torch.Tensor, m_s: torch.Tensor) -> torch.Tensor:
    """Closed-form gradient of ``modulate`` w.r.t. its modulated input."""
    if grad_out.shape != m_s.shape:
        raise ValueError("shape mismatch")
    return grad_out * (1 + torch.sigmoid(m_s))


class Modulation(nn.Module):
    """Recalibrates a feature volume with scale/bias maps computed from a
    conditioning volume by two 1x1x1 convolutions.

    ``variant`` selects the ablation forms: ``grad_only`` computes the sum
    ``v + cond`` in the forward pass but back-propagates through the
    modulation; ``forward_only`` does the reverse.
    """

    def __init__(self, channels, variant="full"):
        super().__init__()
        if variant not in MODULATION_VARIANTS:
            raise ValueError(f"unknown modulation variant {variant!r}")
        self.variant = variant
        self.scale = nn.Conv3d(channels, channels, 1)
        self.bias = nn.Conv3d(channels, channels, 1)

    def maps(self, cond):
        return self.scale(cond), self.bias(cond)

    def forward(self, v, cond):
        m_s, m_b = self.maps(cond)
        out = modulate(v, m_s, m_b)
        if self.variant == "grad_only":
            return out + (fuse_add(v, cond) - out).detach()
        if self.variant == "forward_only":
            added = fuse_add(v, cond)
            return added + (out - added).detach()
        return out
