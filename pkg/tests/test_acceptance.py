"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 8-10 share one toy training session (full, d and i variants, 2000
steps each), so a complete run takes roughly 40 minutes on one CPU core.
Run alone with ``pytest tests/test_acceptance.py``.
"""
import functools
import json
import statistics
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from hstrnet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from hstrnet.cli import main as cli_main
from hstrnet.config import ModelConfig, PatchMatchConfig, TrainConfig
from hstrnet.context import deform_sample
from hstrnet.data import degrade, index_dataset, make_eval_sample, read_frame
from hstrnet.evaluation import cascade_group, evaluate, evaluate_cascade, psnr, ssim
from hstrnet.fusion import FusionOutput, reconstruct
from hstrnet.motion import warp
from hstrnet.network import HSTRNet, count_parameters
from hstrnet.patchmatch import CrossFrameAttention
from hstrnet.selftest import attention_oracle_error, parameter_gradient_error
from hstrnet.synthetic import write_toy_corpus
from hstrnet.training import train

RESULTS: dict[int, tuple[str, bool, str]] = {}

TOY_TRAIN = TrainConfig(lr=1e-3, batch_size=4, crop=64, max_steps=2000, epochs=100_000, ckpt_interval=0)


def criterion(number: int, title: str):
    """Record the outcome of a criterion; the test body returns a detail string."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except Exception as exc:
                RESULTS[number] = (title, False, f"{type(exc).__name__}: {exc}".splitlines()[0])
                raise
            RESULTS[number] = (title, True, detail or "")
        return run
    return wrap


def summary_lines() -> list[str]:
    return [f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
            for n, (title, ok, detail) in sorted(RESULTS.items())]


@criterion(1, "warp identity")
def test_criterion_01_warp_identity():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    for _ in range(100):
        h, w = (int(v) for v in torch.randint(8, 96, (2,), generator=g))
        x = torch.rand(1, 3, h, w, generator=g)
        assert torch.equal(warp(x, torch.zeros(1, 2, h, w)), x)
    W = 64
    ramp = (torch.arange(W, dtype=torch.float32) / W).expand(1, 3, 16, W).contiguous()
    shifted = warp(ramp, torch.tensor([1.0, 0.0]).view(1, 2, 1, 1).expand(1, 2, 16, W))
    err = (shifted[..., :-1] - ramp[..., 1:]).abs().max().item()
    elapsed = time.perf_counter() - t0
    assert err <= 1e-6
    assert elapsed < 5
    return f"100/100 bitwise, ramp err {err:.1e}, {elapsed:.2f} s"


@criterion(2, "reconstruction endpoints")
def test_criterion_02_endpoints():
    g = torch.Generator().manual_seed(2)
    r = lambda: torch.rand(2, 3, 16, 16, generator=g)  # noqa: E731
    hw, lr = r(), r()
    zero = torch.zeros(2, 3, 16, 16)
    assert torch.equal(reconstruct(hw, lr, FusionOutput(zero, torch.ones(2, 1, 16, 16)), clamp=False), hw)
    assert torch.equal(reconstruct(hw, lr, FusionOutput(zero, torch.zeros(2, 1, 16, 16)), clamp=False), lr)
    worst = 0.0
    for _ in range(50):
        m = torch.rand(2, 1, 16, 16, generator=g)
        a, b = (float(v) for v in 4 * torch.rand(2, generator=g) - 2)
        x, y = (r(), r(), r()), (r(), r(), r())
        f = lambda h, l, res: reconstruct(h, l, FusionOutput(res, m), clamp=False)  # noqa: E731, E741
        lhs = f(*(a * u + b * v for u, v in zip(x, y)))
        worst = max(worst, (lhs - (a * f(*x) + b * f(*y))).abs().max().item())
    assert worst <= 1e-6
    return f"endpoints exact, superposition err {worst:.1e}"


@criterion(3, "attention oracle")
def test_criterion_03_attention():
    err, rows = attention_oracle_error(n_windows=1000)
    attn = CrossFrameAttention(48, PatchMatchConfig(tied_qkv=True))
    t = torch.randn(1000, 9, 48)
    with torch.no_grad():
        _, a_ref, a_lr = attn(t, t, return_maps=True)
    sym = (a_ref - a_lr).abs().max().item()
    assert err <= 1e-5 and rows <= 1e-5 and sym <= 1e-6
    return f"oracle {err:.1e}, row sums {rows:.1e}, tied symmetry {sym:.1e}"


@criterion(4, "deformable-conv oracle")
def test_criterion_04_deform():
    # oracle comparisons run in 64-bit; float32 differs from conv2d only by summation order
    g = torch.Generator().manual_seed(4)
    x = torch.rand(2, 16, 24, 32, generator=g, dtype=torch.float64)
    w = 0.2 * torch.randn(8, 16, 3, 3, generator=g, dtype=torch.float64)
    b = torch.randn(8, generator=g, dtype=torch.float64)
    zero = torch.zeros(2, 2, 24, 32, dtype=torch.float64)
    dense = F.conv2d(F.pad(x, (1,) * 4, mode="replicate"), w, b)
    err64 = (deform_sample(x, zero, w, b) - dense).abs().max().item()
    x32, w32, b32 = x.float(), w.float(), b.float()
    dense32 = F.conv2d(F.pad(x32, (1,) * 4, mode="replicate"), w32, b32)
    rel32 = ((deform_sample(x32, zero.float(), w32, b32) - dense32).abs().max() / dense32.abs().max()).item()
    worst_shift = 0.0
    for dx, dy in [(1, 0), (0, 1), (-2, 1), (3, -2)]:
        off = torch.tensor([float(dx), float(dy)], dtype=torch.float64).view(1, 2, 1, 1).expand(2, 2, 24, 32)
        out = deform_sample(x, off, w, b)
        oracle = F.conv2d(F.pad(torch.roll(x, (-dy, -dx), (2, 3)), (1,) * 4, mode="replicate"), w, b)
        m = 4  # interior: away from the wrapped and clamped borders
        worst_shift = max(worst_shift, (out - oracle)[..., m:-m, m:-m].abs().max().item())
    assert err64 <= 1e-6 and worst_shift <= 1e-6 and rel32 <= 1e-6
    return f"dense conv {err64:.1e} (64-bit; 32-bit rel {rel32:.1e}), integer shifts {worst_shift:.1e}"


@criterion(5, "shape ladders")
def test_criterion_05_shapes():
    t0 = time.perf_counter()
    model = HSTRNet(ModelConfig()).eval()
    seen = {}
    model.context.register_forward_hook(lambda m, i, o: seen.__setitem__("ctx", o))
    model.patchmatch.register_forward_hook(lambda m, i, o: seen.__setitem__("pm", o))
    rng = np.random.default_rng(5)
    sizes = [tuple(int(v) * 16 for v in rng.integers(2, 29, 2)) for _ in range(20)]
    with torch.no_grad():
        for H, W in sizes:
            out = model(torch.rand(1, 3, H, W), torch.rand(1, 3, H, W))
            assert out.shape == (1, 3, H, W)
            assert [tuple(c.shape[1:]) for c in seen["ctx"]] == [
                (ch, H >> k, W >> k) for k, ch in zip((1, 2, 3, 4), (16, 32, 64, 128))]
            assert [tuple(p.shape[1:]) for p in seen["pm"]] == [
                (ch, H >> k, W >> k) for k, ch in zip((2, 3, 4), (48, 96, 192))]
        out = model(torch.rand(1, 3, 380, 672), torch.rand(1, 3, 380, 672))
    elapsed = time.perf_counter() - t0
    assert out.shape == (1, 3, 380, 672)
    assert elapsed < 60
    return f"20 resolutions + 672x380, {elapsed:.1f} s"


@criterion(6, "gradient integrity")
def test_criterion_06_gradients():
    err = parameter_gradient_error(HSTRNet(ModelConfig()), n=20, size=8)
    model = HSTRNet(ModelConfig())
    g = torch.Generator().manual_seed(6)
    lr, ref, gt = (torch.rand(1, 3, 32, 32, generator=g) for _ in range(3))
    (model.predict(lr, ref).raw - gt).abs().mean().backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().gt(0).any()]
    assert err < 1e-4, f"finite-difference rel err {err:.2e}"
    assert not dead, f"no gradient: {dead[:3]}"
    n_tensors = len(list(model.parameters()))
    return f"FD rel err {err:.1e}; {n_tensors}/{n_tensors} tensors with gradient"


@criterion(7, "metric oracles")
def test_criterion_07_metrics():
    a = torch.full((3, 16, 16), 128 / 255)
    b = torch.full((3, 16, 16), 144 / 255)
    p = psnr(a, b)
    x, y = torch.rand(3, 24, 24), torch.rand(3, 24, 24)
    assert abs(p - 24.05) <= 0.01
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert psnr(x, y) == psnr(y, x) and ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    return f"psnr {p:.4f} dB, ssim(x,x) = {ssim(x, x):.6f}, symmetric"


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = write_toy_corpus(tmp_path_factory.mktemp("toy"), "septuplet", n_clips=4, size=(96, 96), seed=0)
    return index_dataset(root, "septuplet")


@pytest.fixture(scope="module")
def toy_runs(toy, tmp_path_factory):
    """Train each variant with identical seed and steps; keep checkpoint, log and wall time."""
    runs = {}

    def get(variant):
        if variant not in runs:
            out = tmp_path_factory.mktemp(f"run_{variant}")
            t0 = time.perf_counter()
            ckpt, log = train(TOY_TRAIN, toy, ModelConfig(variant=variant), seed=0, out_dir=out)
            runs[variant] = (ckpt, log, time.perf_counter() - t0)
        return runs[variant]
    return get


def _ref_baseline(index) -> float:
    vals = []
    for entry in index.entries:
        s = make_eval_sample(entry, "septuplet")
        vals.append(psnr(s.ref, s.gt))
    return statistics.fmean(vals)


@criterion(8, "toy overfit")
def test_criterion_08_toy_overfit(toy, toy_runs):
    ckpt, log, seconds = toy_runs("full")
    report = evaluate(toy, "septuplet", ckpt.build_model())
    out, lr_base, ref_base = report.mean("psnr"), report.mean("baseline_psnr"), _ref_baseline(toy)
    detail = (f"{out:.2f} dB vs bicubic {lr_base:.2f} (+{out - lr_base:.2f}) and unwarped REF {ref_base:.2f} "
              f"(+{out - ref_base:.2f}); {len(log.steps)} steps in {seconds / 60:.1f} min")
    assert len(log.steps) <= 2000
    assert out - lr_base >= 1.0, detail
    assert out - ref_base >= 0.5, detail
    assert seconds <= 30 * 60, detail
    return detail


@criterion(9, "ablation ordering")
def test_criterion_09_ablation(toy_runs):
    means = {v: statistics.fmean(toy_runs(v)[1].losses) for v in ("full", "d", "i")}
    params = {v: count_parameters(HSTRNet(ModelConfig(variant=v))) for v in ("i", "d", "full")}
    detail = (f"mean loss full {means['full']:.5f}, d {means['d']:.5f}, i {means['i']:.5f}; "
              f"params i {params['i']:,} <= d {params['d']:,} < full {params['full']:,}")
    assert means["full"] <= 1.05 * means["d"], detail
    assert means["d"] <= 1.05 * means["i"], detail
    assert params["i"] <= params["d"] < params["full"], detail
    return detail


@criterion(10, "4x cascade")
def test_criterion_10_cascade(toy, toy_runs):
    for _, paths in toy.entries:
        frames = [read_frame(p) for p in paths[1:6]]
        table = {degrade(f).numpy().tobytes(): f for f in frames}
        preds = cascade_group(frames, lambda lr, ref: table[lr.numpy().tobytes()])
        assert all(torch.equal(p, f) for p, f in zip(preds, frames[1:4]))
    rows = evaluate_cascade(toy, toy_runs("full")[0].build_model())
    mid = statistics.fmean(r["psnr_3rd"] for r in rows)
    outer = statistics.fmean((r["psnr_2nd"] + r["psnr_4th"]) / 2 for r in rows)
    detail = f"oracle stub exact; trained middle {mid:.2f} dB vs outer mean {outer:.2f} dB"
    assert abs(mid - outer) <= 1.5, detail
    return detail


@criterion(11, "determinism")
def test_criterion_11_determinism(tmp_path):
    root = write_toy_corpus(tmp_path / "data", "septuplet", n_clips=4, size=(64, 64), seed=11)
    common = ["--root", str(root), "--seed", "7", "--set", "train.max_steps=6", "--set", "train.crop=32",
              "--set", "train.batch_size=2", "--set", "train.ckpt_interval=3"]
    for run in ("a", "b"):
        assert cli_main(["train", "--out", str(tmp_path / run)] + common) == 0
    for name in ("ckpt_00000003.hstr", "ckpt_00000006.hstr", "final.hstr"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    for run in ("a", "b"):
        assert cli_main(["eval", "--protocol", "septuplet", "--root", str(root), "--ckpt",
                         str(tmp_path / "a" / "final.hstr"), "--out", str(tmp_path / f"eval_{run}")]) == 0
    csv_a = (tmp_path / "eval_a" / "metrics.csv").read_bytes()
    assert csv_a == (tmp_path / "eval_b" / "metrics.csv").read_bytes()
    # summary.json also carries wall-clock timing, which is not part of the report contract
    strip = lambda p: {k: v for k, v in json.loads(p.read_text()).items() if k != "timing"}  # noqa: E731
    assert strip(tmp_path / "eval_a" / "summary.json") == strip(tmp_path / "eval_b" / "summary.json")
    return "checkpoints at steps 3, 6 and final identical; eval metrics identical"


@criterion(12, "latency harness")
def test_criterion_12_bench(tmp_path):
    ckpt = tmp_path / "m.hstr"
    save_checkpoint(Checkpoint.from_model(HSTRNet(ModelConfig())), ckpt)

    def median(res, run):
        out = tmp_path / f"{res}_{run}"
        assert cli_main(["bench", "--ckpt", str(ckpt), "--resolution", res, "--iterations", "10",
                         "--out", str(out)]) == 0
        return json.loads((out / "bench.json").read_text())["median_ms"]

    small = [median("128x128", k) for k in range(2)]
    large = [median("256x448", k) for k in range(2)]
    spread = max(abs(a - b) / min(a, b) for a, b in (small, large))
    detail = (f"median 128x128 {small[0]:.0f}/{small[1]:.0f} ms, 256x448 {large[0]:.0f}/{large[1]:.0f} ms, "
              f"repeat spread {spread:.1%}")
    assert min(large) > max(small), detail
    assert spread <= 0.20, detail
    assert load_checkpoint(ckpt).step == 0
    return detail


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
