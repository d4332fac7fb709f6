"""Coarse-to-fine bidirectional flow estimation and backward warping."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig


def bilinear_sample(src: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``src`` (B, C, H, W) at pixel coordinates ``x``, ``y`` (B, h, w).

    Coordinates are clamped to the frame first, so out-of-range samples take
    the border value. Integer coordinates return the source values exactly.
    """
    B, C, H, W = src.shape
    x = x.clamp(0, W - 1)
    y = y.clamp(0, H - 1)
    x0 = x.detach().floor()
    y0 = y.detach().floor()
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    flat = src.reshape(B, C, H * W)
    out_shape = (B, C) + tuple(x.shape[1:])

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(B, 1, -1).expand(B, C, -1)
        return flat.gather(2, idx).reshape(out_shape)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bot = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bot * wy


def pixel_grid(h: int, w: int, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    ys = torch.arange(h, dtype=like.dtype, device=like.device).view(1, h, 1)
    xs = torch.arange(w, dtype=like.dtype, device=like.device).view(1, 1, w)
    return xs, ys


def warp(src: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward warp: ``out(x, y) = src(x + dx, y + dy)`` with border clamping."""
    if src.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"flow size {tuple(flow.shape[-2:])} does not match source {tuple(src.shape[-2:])}")
    if flow.shape[1] != 2:
        raise ValueError("warp expects a 2-channel flow field")
    xs, ys = pixel_grid(*src.shape[-2:], flow)
    return bilinear_sample(src, xs + flow[:, 0], ys + flow[:, 1])


def conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.2))


class MotionBlock(nn.Module):
    """Prescale, two strided convs, eight residual convs, transposed conv to 4 flow channels."""

    def __init__(self, in_channels: int, hidden: int, scale: int):
        super().__init__()
        self.in_channels = in_channels
        self.scale = scale
        self.conv0 = nn.Sequential(conv(in_channels, hidden, 2), conv(hidden, hidden, 2))
        self.convblock = nn.Sequential(*[conv(hidden, hidden) for _ in range(8)])
        self.lastconv = nn.ConvTranspose2d(hidden, 4, 4, 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"motion block expects {self.in_channels} channels, got {x.shape[1]}")
        H, W = x.shape[-2:]
        s = self.scale
        if H % (4 * s) or W % (4 * s):
            raise ValueError(f"input {H}x{W} must be divisible by {4 * s}")
        if s != 1:
            x = F.interpolate(x, size=(H // s, W // s), mode="bilinear", align_corners=False)
        x = self.conv0(x)
        x = self.convblock(x) + x
        flow = self.lastconv(x)
        return F.interpolate(flow, size=(H, W), mode="bilinear", align_corners=False) * (2 * s)


class MotionEstimator(nn.Module):
    """Three motion blocks refining a 4-channel flow (LR->REF, REF->LR) additively."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        mc = cfg.motion
        self.feed_frames = cfg.feed_frames
        later = 7 + (6 if self.feed_frames else 0)
        self.block0 = MotionBlock(6, mc.widths[0], mc.scales[0])
        self.block1 = MotionBlock(later, mc.widths[1], mc.scales[1])
        self.block2 = MotionBlock(later, mc.widths[2], mc.scales[2])

    def forward(self, lr: torch.Tensor, ref: torch.Tensor):
        """Return ``(flow, warped_ref)``; ``flow[:, :2]`` is the LR->REF field."""
        if lr.shape != ref.shape:
            raise ValueError(f"LR {tuple(lr.shape)} and REF {tuple(ref.shape)} differ in shape")
        H, W = lr.shape[-2:]
        if H % 16 or W % 16:
            raise ValueError(f"flow estimation needs sizes divisible by 16, got {H}x{W}")
        flow = self.block0(torch.cat([lr, ref], 1))
        warped = warp(ref, flow[:, :2])
        for block in (self.block1, self.block2):
            inp = [warped, flow] + ([lr, ref] if self.feed_frames else [])
            flow = flow + block(torch.cat(inp, 1))
            warped = warp(ref, flow[:, :2])
        return flow, warped


def estimate_flow(lr: torch.Tensor, ref: torch.Tensor, estimator: MotionEstimator):
    return estimator(lr, ref)
