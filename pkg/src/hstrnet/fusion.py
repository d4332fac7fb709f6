"""UNet-style fusion producing a residual and a blending mask."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .config import ModelConfig


class FusionOutput(NamedTuple):
    residual: torch.Tensor
    mask: torch.Tensor


def side_channels(cfg: ModelConfig) -> list[int]:
    """Channels concatenated after each encoder layer (context + patch-match)."""
    ctx = list(cfg.context.channels)
    pm = [0] + list(cfg.patchmatch.channels) if cfg.uses_patchmatch else [0, 0, 0, 0]
    return [c + p for c, p in zip(ctx, pm)]


class FusionNet(nn.Module):
    """Encoder concatenates side inputs after every downsampling layer; the
    decoder consumes those concatenated tensors as skips."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        down, up = cfg.fusion.down, cfg.fusion.up
        side = side_channels(cfg)
        self.in_channels = 9 if cfg.bidirectional_fusion else 6
        self.uses_patchmatch = cfg.uses_patchmatch

        # width of the tensor entering each down layer / leaving the encoder
        widths = [self.in_channels]
        for k in range(4):
            widths.append(down[k] + side[k])
        for k in range(4):
            self.add_module(f"down{k + 1}", nn.Sequential(nn.Conv2d(widths[k], down[k], 3, 2, 1), nn.ReLU()))
        up_in = [widths[4]] + [up[k - 1] + widths[4 - k] for k in range(1, 4)]
        for k in range(4):
            self.add_module(f"up{k + 1}", nn.Sequential(
                nn.ConvTranspose2d(up_in[k], up[k], 3, 2, 1, output_padding=1), nn.ReLU()))
        self.final = nn.Conv2d(up[3], 4, 3, 1, 1)

    def forward(self, hr_warped: torch.Tensor, lr: torch.Tensor, ctx: list[torch.Tensor],
                pm: list[torch.Tensor] | None = None, extra: torch.Tensor | None = None) -> FusionOutput:
        H, W = lr.shape[-2:]
        if hr_warped.shape != lr.shape:
            raise ValueError("warped reference and LR differ in shape")
        if self.uses_patchmatch != (pm is not None):
            raise ValueError("patch-match features given/omitted inconsistently with the variant")
        for k, c in enumerate(ctx):
            if c.shape[-2:] != (H >> (k + 1), W >> (k + 1)):
                raise ValueError(f"context level {k} has size {tuple(c.shape[-2:])}, "
                                 f"expected {(H >> (k + 1), W >> (k + 1))}")
        for k, p in enumerate(pm or []):
            if p.shape[-2:] != (H >> (k + 2), W >> (k + 2)):
                raise ValueError(f"patch-match level {k} has size {tuple(p.shape[-2:])}, "
                                 f"expected {(H >> (k + 2), W >> (k + 2))}")

        x = torch.cat([hr_warped, lr] + ([extra] if extra is not None else []), 1)
        skips = []
        for k in range(4):
            x = getattr(self, f"down{k + 1}")(x)
            parts = [x, ctx[k]]
            if pm is not None and k > 0:
                parts.append(pm[k - 1])
            x = torch.cat(parts, 1)
            skips.append(x)
        x = self.up1(x)
        x = self.up2(torch.cat([x, skips[2]], 1))
        x = self.up3(torch.cat([x, skips[1]], 1))
        x = self.up4(torch.cat([x, skips[0]], 1))
        out = self.final(x)
        return FusionOutput(out[:, :3], torch.sigmoid(out[:, 3:4]))


def reconstruct(hr_warped: torch.Tensor, lr: torch.Tensor, out: FusionOutput, clamp: bool = True) -> torch.Tensor:
    """``m * hr_warped + (1 - m) * lr + R``; clamping is for output frames only."""
    hr = out.mask * hr_warped + (1 - out.mask) * lr + out.residual
    return hr.clamp(0.0, 1.0) if clamp else hr
