"""End-to-end model, parameter initialisation, padding and the 4x cascade."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, derive_seed
from .context import ContextNet, DeformSample
from .fusion import FusionNet, reconstruct
from .motion import MotionEstimator, warp
from .patchmatch import CrossFrameAttention, PatchMatcher

# output layers start near (not exactly) zero so every parameter gets gradient
OUTPUT_INIT_SCALE = 1e-2


@dataclass(frozen=True)
class PadRecord:
    height: int
    width: int
    top: int
    bottom: int
    left: int
    right: int

    @property
    def padded(self) -> tuple[int, int]:
        return self.height + self.top + self.bottom, self.width + self.left + self.right


def pad_to_multiple(x: torch.Tensor, multiple: int = 16) -> tuple[torch.Tensor, PadRecord]:
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    rec = PadRecord(H, W, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if ph or pw:
        x = F.pad(x, (rec.left, rec.right, rec.top, rec.bottom), mode="replicate")
    return x, rec


def unpad(x: torch.Tensor, rec: PadRecord) -> torch.Tensor:
    return x[..., rec.top:rec.top + rec.height, rec.left:rec.left + rec.width]


class Prediction(NamedTuple):
    output: torch.Tensor      # clamped reconstruction
    raw: torch.Tensor         # unclamped reconstruction, used by the loss
    flow: torch.Tensor
    warped: torch.Tensor
    residual: torch.Tensor
    mask: torch.Tensor


class HSTRNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.motion = MotionEstimator(cfg)
        self.context = ContextNet(cfg, deformable=cfg.deformable_context)
        if cfg.uses_patchmatch:
            self.patchmatch = PatchMatcher(cfg)
        self.fusion = FusionNet(cfg)
        init_parameters(self, cfg.seed)

    def predict(self, lr: torch.Tensor, ref: torch.Tensor) -> Prediction:
        """Run on (B, 3, H, W) inputs of any size; padding is undone on the outputs."""
        if lr.shape != ref.shape:
            raise ValueError(f"LR size {tuple(lr.shape[-2:])} and REF size {tuple(ref.shape[-2:])} differ")
        lr_p, rec = pad_to_multiple(lr)
        ref_p, _ = pad_to_multiple(ref)
        flow, warped = self.motion(lr_p, ref_p)
        ctx = self.context(ref_p, flow[:, :2])
        pm = self.patchmatch(lr_p, ref_p) if self.cfg.uses_patchmatch else None
        extra = warp(lr_p, flow[:, 2:]) if self.cfg.bidirectional_fusion else None
        fused = self.fusion(warped, lr_p, ctx, pm, extra)
        raw = reconstruct(warped, lr_p, fused, clamp=False)
        crop = lambda t: unpad(t, rec)  # noqa: E731
        return Prediction(crop(raw).clamp(0, 1), crop(raw), crop(flow), crop(warped),
                          crop(fused.residual), crop(fused.mask))

    def forward(self, lr: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        return self.predict(lr, ref).output


def _uniform_fan_in(t: torch.Tensor, fan_in: int, gen: torch.Generator, scale: float = 1.0):
    # He-uniform bound for leaky rectifiers with slope 0.2
    bound = scale * math.sqrt(6.0 / ((1 + 0.2 ** 2) * fan_in))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Initialise every layer from a generator seeded by (seed, layer name).

    Layers that share a name across variants therefore start identical.
    """
    for name, mod in model.named_modules():
        gen = torch.Generator().manual_seed(derive_seed(seed, name))
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            if isinstance(mod, nn.ConvTranspose2d):
                fan_in = mod.weight.shape[0] * mod.weight[0, 0].numel()
            else:
                fan_in = mod.weight[0].numel()
            scale = OUTPUT_INIT_SCALE if name.endswith(("lastconv", "offset_conv", "fusion.final")) else 1.0
            _uniform_fan_in(mod.weight, fan_in, gen, scale)
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
        elif isinstance(mod, nn.LayerNorm):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)
        elif isinstance(mod, DeformSample):
            mod.reset_identity()
        elif isinstance(mod, CrossFrameAttention):
            nn.init.trunc_normal_(mod.relative_position_bias_table, std=0.02, a=-0.04, b=0.04, generator=gen)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


ModelFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def upsample_4x(model: ModelFn, lr_frames: list[torch.Tensor], refs: list[torch.Tensor]) -> list[torch.Tensor]:
    """Three HR frames from LR at t-1, t, t+1 and REF at t-2, t+2.

    The outer frames are predicted first and then serve as references for
    the middle frame, whose two predictions are averaged.
    """
    if len(lr_frames) != 3 or len(refs) != 2:
        raise ValueError("need three LR frames and two reference frames")
    shapes = {tuple(t.shape) for t in list(lr_frames) + list(refs)}
    if len(shapes) != 1:
        raise ValueError(f"cascade inputs differ in shape: {sorted(shapes)}")
    lr_prev, lr_mid, lr_next = lr_frames
    hr_prev = model(lr_prev, refs[0])
    hr_next = model(lr_next, refs[1])
    hr_mid = 0.5 * model(lr_mid, hr_prev) + 0.5 * model(lr_mid, hr_next)
    return [hr_prev, hr_mid, hr_next]
