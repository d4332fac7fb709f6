"""PSNR/SSIM, evaluation protocols and latency benchmarking."""
from __future__ import annotations

import csv
import json
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .data import DatasetIndex, degrade, eval_samples, read_frame
from .network import upsample_4x

PSNR_CAP = 100.0


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def rgb_to_y(img: torch.Tensor) -> torch.Tensor:
    """ITU-R BT.601 luma in [0, 1] (studio range), keeps a channel dim."""
    w = img.new_tensor([65.481, 128.553, 24.966]).view(-1, 1, 1) / 255.0
    return (img * w).sum(-3, keepdim=True) + 16.0 / 255.0


def psnr(a: torch.Tensor, b: torch.Tensor, space: str = "rgb") -> float:
    _check_pair(a, b)
    if space == "y":
        a, b = rgb_to_y(a), rgb_to_y(b)
    mse = float(((a.double() - b.double()) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, space: str = "rgb") -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5) over valid windows, channel mean."""
    _check_pair(a, b)
    if min(a.shape[-2:]) < 11:
        raise ValueError(f"SSIM needs images of at least 11x11, got {tuple(a.shape[-2:])}")
    if space == "y":
        a, b = rgb_to_y(a), rgb_to_y(b)
    a = a.double().reshape(-1, 1, *a.shape[-2:])
    b = b.double().reshape(-1, 1, *b.shape[-2:])
    win = gaussian_window()[None, None]
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = F.conv2d(a, win), F.conv2d(b, win)
    saa = F.conv2d(a * a, win) - mu_a ** 2
    sbb = F.conv2d(b * b, win) - mu_b ** 2
    sab = F.conv2d(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float((num / den).mean())


@dataclass
class MetricsReport:
    protocol: str
    checkpoint: str
    rows: list[dict] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.rows)

    def mean(self, key: str) -> float:
        if not self.rows:
            raise ValueError("empty report")
        return sum(r[key] for r in self.rows) / len(self.rows)

    def summary(self) -> dict:
        return {
            "protocol": self.protocol,
            "checkpoint": self.checkpoint,
            "count": self.count,
            "psnr": self.mean("psnr"),
            "ssim": self.mean("ssim"),
            "baseline_psnr": self.mean("baseline_psnr"),
            "baseline_ssim": self.mean("baseline_ssim"),
            "timing": self.timing,
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            writer.writerows(self.rows)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=1))


ModelFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def as_model_fn(model) -> ModelFn:
    """Wrap an (B, C, H, W) module as a no-grad function of single images."""
    if isinstance(model, torch.nn.Module):
        model.eval()

        def fn(lr, ref):
            with torch.no_grad():
                return model(lr[None], ref[None])[0]
        return fn
    return model


def evaluate(index: DatasetIndex, protocol: str, model, checkpoint_id: str = "",
             metric_space: str = "rgb", factor: int = 4,
             size: tuple[int, int] | None = None) -> MetricsReport:
    """Run ``model`` on every evaluation sample and record PSNR/SSIM of the output and
    of the degraded LR input (the bicubic baseline)."""
    fn = as_model_fn(model)
    report = MetricsReport(protocol, checkpoint_id)
    times = []
    for s in eval_samples(index, protocol, factor, size):
        t0 = time.perf_counter()
        out = fn(s.lr, s.ref).clamp(0, 1)
        times.append((time.perf_counter() - t0) * 1e3)
        report.rows.append({
            "id": s.seq_id,
            "frame": s.frame,
            "psnr": psnr(out, s.gt, metric_space),
            "ssim": ssim(out, s.gt, metric_space),
            "baseline_psnr": psnr(s.lr, s.gt, metric_space),
            "baseline_ssim": ssim(s.lr, s.gt, metric_space),
        })
    if not report.rows:
        raise ValueError("evaluation index produced no samples")
    report.timing = {"mean_ms": statistics.fmean(times), "median_ms": statistics.median(times)}
    return report


def cascade_group(frames: list[torch.Tensor], model, factor: int = 4) -> list[torch.Tensor]:
    """Five HR frames -> predictions for positions 2, 3, 4 from LR there and HR at 1, 5."""
    if len(frames) != 5:
        raise ValueError("a cascade group has five frames")
    fn = as_model_fn(model)
    lrs = [degrade(f, factor) for f in frames[1:4]]
    return [t.clamp(0, 1) for t in upsample_4x(fn, lrs, [frames[0], frames[4]])]


def evaluate_cascade(index: DatasetIndex, model, metric_space: str = "rgb", factor: int = 4) -> list[dict]:
    """Per-clip PSNR of the 4x cascade on septuplet frames 2..6 (positions 2nd, 3rd, 4th)."""
    rows = []
    for seq_id, paths in index.entries:
        frames = [read_frame(p) for p in paths[1:6]]
        preds = cascade_group(frames, model, factor)
        rows.append({"id": seq_id, **{f"psnr_{k}": psnr(p, g, metric_space)
                                      for k, p, g in zip(("2nd", "3rd", "4th"), preds, frames[1:4])}})
    return rows


def device_descriptor() -> dict:
    return {
        "device": os.environ.get("HSTRNET_DEVICE", "cpu"),
        "machine": platform.machine(),
        "processor": platform.processor(),
        "threads": torch.get_num_threads(),
        "torch": torch.__version__,
    }


def benchmark_latency(model: torch.nn.Module, resolution: tuple[int, int], iterations: int = 20,
                      warmup: int = 3, seed: int = 0) -> dict:
    """Single-frame forward wall time at ``resolution`` = (height, width)."""
    if iterations < 10:
        raise ValueError(f"benchmark needs at least 10 iterations, got {iterations}")
    gen = torch.Generator().manual_seed(seed)
    param = next(model.parameters())
    lr = torch.rand(1, 3, *resolution, generator=gen).to(param)
    ref = torch.rand(1, 3, *resolution, generator=gen).to(param)
    model.eval()
    times = []
    with torch.inference_mode():
        for i in range(warmup + iterations):
            t0 = time.perf_counter()
            model(lr, ref)
            dt = (time.perf_counter() - t0) * 1e3
            if i >= warmup:
                times.append(dt)
    return {
        "resolution": list(resolution),
        "iterations": iterations,
        "mean_ms": statistics.fmean(times),
        "median_ms": statistics.median(times),
        "std_ms": statistics.pstdev(times),
        **device_descriptor(),
    }
