"""Invariant checks on synthetic data, runnable from the command line."""
from __future__ import annotations

import tempfile
import traceback
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, PatchMatchConfig
from .context import deform_sample
from .evaluation import psnr, ssim
from .fusion import FusionOutput, reconstruct
from .motion import warp
from .network import HSTRNet
from .patchmatch import CrossFrameAttention


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def flow_gradient_error(dtype: torch.dtype, seed: int = 0, size: int = 8, eps: float | None = None) -> float:
    """Worst relative error between autograd and central differences of sum(warp) w.r.t. flow."""
    gen = torch.Generator().manual_seed(seed)
    src = torch.rand(1, 3, size, size, generator=gen, dtype=dtype)
    # keep samples away from integer crossings where the bilinear weights kink
    flow = (torch.randint(-2, 3, (1, 2, size, size), generator=gen) +
            0.25 + 0.5 * torch.rand(1, 2, size, size, generator=gen)).to(dtype).requires_grad_()
    warp(src, flow).sum().backward()
    # samples sit at least 0.25 px from a cell edge, so a step of 0.01 never crosses one
    eps = eps or (1e-2 if dtype == torch.float32 else 1e-6)
    worst = 0.0
    with torch.no_grad():
        for i in range(flow.numel()):
            f = flow.detach().clone().flatten()
            f[i] += eps
            up = warp(src, f.view_as(flow))
            f[i] -= 2 * eps
            down = warp(src, f.view_as(flow))
            # difference before summing to avoid cancellation in 32-bit
            num = (up - down).double().sum().item() / (2 * eps)
            worst = max(worst, relative_error(flow.grad.flatten()[i].item(), num))
    return worst


def parameter_gradient_error(model: HSTRNet, n: int = 20, size: int = 8, seed: int = 0,
                             eps: float = 1e-6) -> float:
    """Central-difference check of the L1 loss gradient on ``n`` random scalar parameters (64-bit)."""
    model = model.double()
    gen = torch.Generator().manual_seed(seed)
    lr = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64)
    ref = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64)
    gt = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64)

    def loss():
        return (model.predict(lr, ref).raw - gt).abs().mean()

    model.zero_grad()
    loss().backward()
    named = [(k, p) for k, p in model.named_parameters()]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        name, p = named[rng.integers(len(named))]
        j = int(rng.integers(p.numel()))
        analytic = p.grad.flatten()[j].item()
        with torch.no_grad():
            flat = p.view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = loss().item()
            flat[j] = orig - eps
            down = loss().item()
            flat[j] = orig
        # below 1e-6 the difference quotient is at float64 round-off (~1e-11 absolute),
        # so such entries are compared on an absolute scale
        worst = max(worst, relative_error(analytic, (up - down) / (2 * eps), floor=1e-6))
    return worst


def attention_oracle_error(n_windows: int = 50, seed: int = 0) -> tuple[float, float]:
    """Max deviation from a float64 dense product, and max row-sum deviation."""
    torch.manual_seed(seed)
    attn = CrossFrameAttention(48, PatchMatchConfig())
    with torch.no_grad():
        attn.relative_position_bias_table.normal_(0, 0.5)
    t_lr, t_ref = torch.randn(n_windows, 9, 48), torch.randn(n_windows, 9, 48)
    with torch.no_grad():
        out, a_ref, a_lr = attn(t_lr, t_ref, return_maps=True)
    W, b = attn.qkv_lr.weight.double(), attn.qkv_lr.bias.double()
    Wr, br = attn.qkv_ref.weight.double(), attn.qkv_ref.bias.double()
    bias = attn.position_bias()[0].detach().double()
    worst = 0.0
    for w in range(n_windows):
        ql, kl, _ = (t_lr[w].double() @ W.T + b).split(48, -1)
        qr, kr, vr = (t_ref[w].double() @ Wr.T + br).split(48, -1)
        A_ref = torch.softmax(ql @ kr.T / np.sqrt(48) + bias, -1)
        A_lr = torch.softmax(qr @ kl.T / np.sqrt(48) + bias, -1)
        worst = max(worst, (A_lr @ (A_ref @ vr) - out[w].double()).abs().max().item())
    rows = max((a_ref.sum(-1) - 1).abs().max().item(), (a_lr.sum(-1) - 1).abs().max().item())
    return worst, rows


def _checks(float64: bool, ckpt_path: str | None) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    grad_dtype = torch.float64 if float64 else torch.float32
    grad_tol = 1e-4 if float64 else 1e-2

    def warp_identity():
        x = torch.rand(4, 3, 32, 48)
        return torch.equal(warp(x, torch.zeros(4, 2, 32, 48)), x), "bitwise"

    def warp_ramp():
        W = 64
        ramp = (torch.arange(W, dtype=torch.float32) / W).expand(1, 3, 16, W).contiguous()
        out = warp(ramp, torch.tensor([1.0, 0.0]).view(1, 2, 1, 1).expand(1, 2, 16, W))
        err = (out[..., :-1] - ramp[..., 1:]).abs().max().item()
        return err <= 1e-6, f"max err {err:.2e}"

    def reconstruction_endpoints():
        hw, lr = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
        zero = torch.zeros(1, 3, 8, 8)
        ok = torch.equal(reconstruct(hw, lr, FusionOutput(zero, torch.ones(1, 1, 8, 8)), clamp=False), hw)
        ok &= torch.equal(reconstruct(hw, lr, FusionOutput(zero, torch.zeros(1, 1, 8, 8)), clamp=False), lr)
        return ok, "m=1 -> warped, m=0 -> LR"

    def attention():
        err, rows = attention_oracle_error()
        return err <= 1e-5 and rows <= 1e-5, f"oracle {err:.2e}, rows {rows:.2e}"

    def deform():
        x = torch.rand(1, 8, 16, 16)
        w, b = torch.randn(8, 8, 3, 3), torch.randn(8)
        dense = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), w, b)
        err = (deform_sample(x, torch.zeros(1, 2, 16, 16), w, b) - dense).abs().max().item()
        return err <= 1e-5, f"max err {err:.2e}"

    def shapes():
        model = HSTRNet(ModelConfig())
        with torch.no_grad():
            lr = torch.rand(1, 3, 48, 80)
            flow, _ = model.motion(lr, lr)
            ctx = model.context(lr, flow[:, :2])
            pm = model.patchmatch(lr, lr)
            out = model(torch.rand(1, 3, 38, 67), torch.rand(1, 3, 38, 67))
        ok = [tuple(c.shape[1:]) for c in ctx] == [(16, 24, 40), (32, 12, 20), (64, 6, 10), (128, 3, 5)]
        ok &= [tuple(p.shape[1:]) for p in pm] == [(48, 12, 20), (96, 6, 10), (192, 3, 5)]
        ok &= tuple(out.shape) == (1, 3, 38, 67)
        return ok, "context, patch-match and output ladders"

    def warp_gradient():
        err = flow_gradient_error(grad_dtype)
        return err < grad_tol, f"rel err {err:.2e} (tol {grad_tol:g})"

    def model_gradient():
        err = parameter_gradient_error(HSTRNet(ModelConfig()))
        return err < grad_tol, f"rel err {err:.2e} (tol {grad_tol:g})"

    def metrics():
        a = torch.full((3, 16, 16), 128 / 255)
        b = torch.full((3, 16, 16), 144 / 255)
        p = psnr(a, b)
        x = torch.rand(3, 16, 16)
        ok = abs(p - 24.05) <= 0.01 and abs(ssim(x, x) - 1) < 1e-12 and psnr(a, b) == psnr(b, a)
        return ok, f"psnr {p:.3f} dB"

    def checkpoint_roundtrip():
        model = HSTRNet(ModelConfig(variant="i"))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.hstr"
            save_checkpoint(Checkpoint.from_model(model), path)
            back = load_checkpoint(path)
        ok = all(np.array_equal(v, back.params[k]) for k, v in Checkpoint.from_model(model).params.items())
        return ok, "bitwise"

    checks = [
        ("warp identity", warp_identity),
        ("warp ramp shift", warp_ramp),
        ("reconstruction endpoints", reconstruction_endpoints),
        ("attention oracle", attention),
        ("deformable = dense conv", deform),
        ("shape ladders", shapes),
        ("flow gradient", warp_gradient),
        ("checkpoint round trip", checkpoint_roundtrip),
        ("metric oracles", metrics),
    ]
    if float64:
        checks.append(("parameter gradients", model_gradient))
    if ckpt_path:
        checks.append(("load checkpoint", lambda: (load_checkpoint(ckpt_path) is not None, str(ckpt_path))))
    return checks


def run_selftest(float64: bool = False, ckpt_path: str | None = None, echo=print) -> bool:
    torch.manual_seed(0)
    results = []
    for name, fn in _checks(float64, ckpt_path):
        try:
            ok, detail = fn()
        except Exception as exc:  # reported in the table
            if name == "load checkpoint":
                raise
            ok, detail = False, f"{type(exc).__name__}: {exc}"
            traceback.print_exc()
        results.append((name, bool(ok), detail))
    width = max(len(n) for n, _, _ in results)
    for name, ok, detail in results:
        echo(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return all(ok for _, ok, _ in results)
