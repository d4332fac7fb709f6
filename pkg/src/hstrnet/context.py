"""Multi-scale reference features aligned by the estimated flow."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .motion import bilinear_sample, pixel_grid, warp

_TAPS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def downscale_flow(flow: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Average-pool a flow field and rescale the displacements to the new grid."""
    h, w = flow.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"flow size {h}x{w} is not divisible by {factor}")
    return F.avg_pool2d(flow, factor) / factor


def deform_sample(features: torch.Tensor, offsets: torch.Tensor, weight: torch.Tensor,
                  bias: torch.Tensor | None = None, tap_offsets: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 convolution whose taps are all displaced by ``offsets`` (B, 2, H, W).

    Each tap is read with bilinear interpolation and border clamping.
    ``tap_offsets`` (B, 18, H, W) optionally adds a separate (dx, dy) per tap.
    """
    B, C, H, W = features.shape
    if offsets.shape[-2:] != (H, W):
        raise ValueError("offset field must match the feature resolution")
    xs, ys = pixel_grid(H, W, offsets)
    bx = xs + offsets[:, 0]
    by = ys + offsets[:, 1]
    cols = []
    for k, (dy, dx) in enumerate(_TAPS):
        x, y = bx + dx, by + dy
        if tap_offsets is not None:
            x = x + tap_offsets[:, 2 * k]
            y = y + tap_offsets[:, 2 * k + 1]
        cols.append(bilinear_sample(features, x, y))
    cols = torch.stack(cols, 2)  # B, C, 9, H, W
    out = torch.einsum("bckhw,ock->bohw", cols, weight.reshape(weight.shape[0], C, 9))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class DeformSample(nn.Module):
    def __init__(self, channels: int, learned_offsets: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(channels, channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.offset_conv = nn.Conv2d(channels + 2, 18, 3, 1, 1) if learned_offsets else None
        self.reset_identity()

    def reset_identity(self):
        with torch.no_grad():
            self.weight.zero_()
            self.weight[:, :, 1, 1] = torch.eye(self.weight.shape[0])
            self.bias.zero_()
            if self.offset_conv is not None:
                self.offset_conv.weight.zero_()
                self.offset_conv.bias.zero_()

    def forward(self, features, offsets):
        taps = None
        if self.offset_conv is not None:
            taps = self.offset_conv(torch.cat([features, offsets], 1))
        return deform_sample(features, offsets, self.weight, self.bias, taps)


class ContextNet(nn.Module):
    """Four stride-2 conv levels; each level is aligned by the downscaled flow.

    With ``deformable=False`` the alignment is a fixed backward warp.
    """

    def __init__(self, cfg: ModelConfig, deformable: bool = True):
        super().__init__()
        self.deformable = deformable
        chans = (3,) + tuple(cfg.context.channels)
        for k in range(4):
            self.add_module(f"conv{k}", nn.Sequential(nn.Conv2d(chans[k], chans[k + 1], 3, 2, 1),
                                                      nn.LeakyReLU(0.2)))
            if deformable:
                self.add_module(f"deform{k}", DeformSample(chans[k + 1], cfg.context.learned_offsets))

    def forward(self, ref: torch.Tensor, flow: torch.Tensor) -> list[torch.Tensor]:
        if ref.shape[-2:] != flow.shape[-2:]:
            raise ValueError("flow and reference resolutions differ")
        H, W = ref.shape[-2:]
        if H % 16 or W % 16:
            raise ValueError(f"context extraction needs sizes divisible by 16, got {H}x{W}")
        f, g = ref, flow
        levels = []
        for k in range(4):
            f = getattr(self, f"conv{k}")(f)
            g = downscale_flow(g)
            levels.append(getattr(self, f"deform{k}")(f, g) if self.deformable else warp(f, g))
        return levels
