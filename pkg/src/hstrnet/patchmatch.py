"""Cross-frame windowed attention between LR and REF patch tokens.

Token grids are channels-last tensors ``(B, H, W, C)``.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig, PatchMatchConfig


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, ws * ws, C), windows in row-major order."""
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


def shifted_window_mask(H: int, W: int, ws: int, shift: int) -> torch.Tensor:
    """(nW, N, N) additive mask blocking attention across wrapped regions."""
    region = torch.zeros(1, H, W, 1)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            region[:, hs, wsl, :] = cnt
            cnt += 1
    ids = window_partition(region, ws).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


class CrossFrameAttention(nn.Module):
    """Bidirectional LR/REF correspondence inside token windows.

    ``AT = A_lr @ (A_ref @ V_ref)`` with ``A_ref`` from LR queries against REF
    keys and ``A_lr`` from REF queries against LR keys.
    """

    def __init__(self, dim: int, cfg: PatchMatchConfig):
        super().__init__()
        if dim % cfg.heads:
            raise ValueError(f"{dim} channels do not split into {cfg.heads} heads")
        self.dim = dim
        self.heads = cfg.heads
        self.ws = cfg.window_size
        self.raw = cfg.raw_eq1
        self.tied = cfg.tied_qkv
        self.scale = (dim // cfg.heads) ** -0.5
        self.qkv_lr = nn.Linear(dim, 3 * dim)
        if not self.tied:
            self.qkv_ref = nn.Linear(dim, 3 * dim)
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * self.ws - 1) ** 2, cfg.heads))
        self.register_buffer("relative_position_index", relative_position_index(self.ws), persistent=False)

    def position_bias(self) -> torch.Tensor:
        n = self.ws * self.ws
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, -1).permute(2, 0, 1)

    def _split(self, t: torch.Tensor, proj: nn.Linear):
        B_, N, C = t.shape
        qkv = proj(t).view(B_, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def _normalize(self, a: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        n = a.shape[-1]
        if n == self.ws * self.ws:
            a = a + self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            a = a.view(-1, nw, self.heads, n, n) + mask[None, :, None].to(a)
            a = a.view(-1, self.heads, n, n)
        return a.softmax(-1)

    def forward(self, t_lr: torch.Tensor, t_ref: torch.Tensor, mask: torch.Tensor | None = None,
                return_maps: bool = False):
        if t_lr.shape != t_ref.shape:
            raise ValueError(f"window shapes differ: {tuple(t_lr.shape)} vs {tuple(t_ref.shape)}")
        if t_lr.shape[-1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {t_lr.shape[-1]}")
        B_, N, C = t_lr.shape
        q_l, k_l, _ = self._split(t_lr, self.qkv_lr)
        q_r, k_r, v_r = self._split(t_ref, self.qkv_lr if self.tied else self.qkv_ref)
        if self.raw:
            a_ref = q_l @ k_r.transpose(-2, -1)
            a_lr = q_r @ k_l.transpose(-2, -1)
        else:
            a_ref = self._normalize((q_l * self.scale) @ k_r.transpose(-2, -1), mask)
            a_lr = self._normalize((q_r * self.scale) @ k_l.transpose(-2, -1), mask)
        at = (a_lr @ (a_ref @ v_r)).transpose(1, 2).reshape(B_, N, C)
        if return_maps:
            return at, a_ref, a_lr
        return at


def cross_frame_attention(tokens_lr, tokens_ref, attn: CrossFrameAttention, mask=None):
    return attn(tokens_lr, tokens_ref, mask)


def _mlp(dim: int, ratio: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, ratio * dim), nn.GELU(), nn.Linear(ratio * dim, dim))


class PatchMatchBlock(nn.Module):
    """Windowed cross-frame attention on the LR stream plus a feed-forward layer per stream."""

    def __init__(self, dim: int, cfg: PatchMatchConfig, shifted: bool, ref_ffn: bool = True):
        super().__init__()
        self.ws = cfg.window_size
        self.shift = self.ws // 2 if shifted else 0
        self.norm_lr = nn.LayerNorm(dim)
        self.norm_ref = nn.LayerNorm(dim)
        self.attn = CrossFrameAttention(dim, cfg)
        self.proj = nn.Linear(dim, dim)
        self.norm_lr2 = nn.LayerNorm(dim)
        self.mlp_lr = _mlp(dim, cfg.mlp_ratio)
        # the last block's REF stream is never read, so it has no feed-forward
        self.ref_ffn = ref_ffn
        if ref_ffn:
            self.norm_ref2 = nn.LayerNorm(dim)
            self.mlp_ref = _mlp(dim, cfg.mlp_ratio)

    def attention(self, x_lr: torch.Tensor, x_ref: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x_lr.shape
        ws = self.ws
        ph, pw = (-H) % ws, (-W) % ws
        a = F.pad(self.norm_lr(x_lr), (0, 0, 0, pw, 0, ph))
        b = F.pad(self.norm_ref(x_ref), (0, 0, 0, pw, 0, ph))
        Hp, Wp = H + ph, W + pw
        mask = None
        if self.shift:
            a = torch.roll(a, (-self.shift, -self.shift), (1, 2))
            b = torch.roll(b, (-self.shift, -self.shift), (1, 2))
            mask = shifted_window_mask(Hp, Wp, ws, self.shift).to(a.device)
        at = self.attn(window_partition(a, ws), window_partition(b, ws), mask)
        at = window_reverse(at, ws, Hp, Wp)
        if self.shift:
            at = torch.roll(at, (self.shift, self.shift), (1, 2))
        return at[:, :H, :W, :]

    def forward(self, x_lr: torch.Tensor, x_ref: torch.Tensor):
        x_lr = x_lr + self.proj(self.attention(x_lr, x_ref))
        x_lr = x_lr + self.mlp_lr(self.norm_lr2(x_lr))
        if self.ref_ffn:
            x_ref = x_ref + self.mlp_ref(self.norm_ref2(x_ref))
        return x_lr, x_ref


class PatchMerge(nn.Module):
    """Concatenate 2x2 token neighbourhoods and project 4d -> 2d."""

    def __init__(self, dim: int):
        super().__init__()
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        H, W = x.shape[1:3]
        if H % 2 or W % 2:
            x = F.pad(x, (0, 0, 0, W % 2, 0, H % 2))
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        return self.reduction(x)


class PatchPartition(nn.Module):
    def __init__(self, dim: int, patch: int):
        super().__init__()
        self.patch = patch
        self.proj = nn.Conv2d(3, dim, patch, patch)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        H, W = img.shape[-2:]
        if H % self.patch or W % self.patch:
            raise ValueError(f"image size {H}x{W} is not divisible by the patch size {self.patch}")
        return self.proj(img).permute(0, 2, 3, 1)


class PatchMatcher(nn.Module):
    """Three groups of (regular, shifted) blocks; returns PM_0..PM_2 as (B, C, h, w) maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pc = cfg.patchmatch
        ch = pc.channels
        if any(ch[g + 1] != 2 * ch[g] for g in range(len(ch) - 1)):
            raise ValueError(f"patch-match channels must double per group, got {ch}")
        self.partition = PatchPartition(ch[0], pc.patch_size)
        for g, dim in enumerate(ch, start=1):
            group = nn.Module()
            group.block1 = PatchMatchBlock(dim, pc, shifted=False)
            group.block2 = PatchMatchBlock(dim, pc, shifted=True, ref_ffn=g < len(ch))
            self.add_module(f"group{g}", group)
            if g > 1:
                self.add_module(f"merge{g - 1}", PatchMerge(ch[g - 2]))

    def forward(self, lr: torch.Tensor, ref: torch.Tensor) -> list[torch.Tensor]:
        if lr.shape != ref.shape:
            raise ValueError(f"LR {tuple(lr.shape)} and REF {tuple(ref.shape)} differ in shape")
        H, W = lr.shape[-2:]
        if H % 16 or W % 16:
            raise ValueError(f"patch matching needs sizes divisible by 16, got {H}x{W}")
        t_lr, t_ref = self.partition(lr), self.partition(ref)
        outs = []
        g = 1
        while hasattr(self, f"group{g}"):
            if g > 1:
                merge = getattr(self, f"merge{g - 1}")
                t_lr, t_ref = merge(t_lr), merge(t_ref)
            group = getattr(self, f"group{g}")
            t_lr, t_ref = group.block1(t_lr, t_ref)
            t_lr, t_ref = group.block2(t_lr, t_ref)
            outs.append(t_lr.permute(0, 3, 1, 2))
            g += 1
        return outs
