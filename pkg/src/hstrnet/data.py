"""Synthetic degradation, dataset indexing and sample construction.

Images are float tensors shaped ``(3, H, W)`` (or batched ``(B, 3, H, W)``)
with values in ``[0, 1]``.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

# Catmull-Rom convention; PIL uses the same constant
BICUBIC_A = -0.5

LAYOUT_FRAMES = {"septuplet": 7, "triplet": 3, "sequence": 5}


class DataError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# image I/O


def load_image(path: str | Path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(img: torch.Tensor, path: str | Path) -> None:
    arr = img.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path)


@lru_cache(maxsize=512)
def _cached_image(path: str) -> torch.Tensor:
    return load_image(path)


def read_frame(path: str | Path) -> torch.Tensor:
    return _cached_image(str(path)).clone()


# ----------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=64)
def resize_weights(in_size: int, out_size: int, a: float = BICUBIC_A) -> np.ndarray:
    """``(out_size, in_size)`` interpolation matrix.

    When shrinking, the kernel is stretched by the scale factor (antialiasing).
    Taps that fall outside the image are dropped and the row renormalised.
    """
    scale = in_size / out_size
    support = max(scale, 1.0)
    centers = (np.arange(out_size) + 0.5) * scale
    src = np.arange(in_size) + 0.5
    w = cubic_kernel((src[None, :] - centers[:, None]) / support, a)
    return w / w.sum(axis=1, keepdims=True)


def resize(img: torch.Tensor, height: int, width: int, a: float = BICUBIC_A) -> torch.Tensor:
    """Separable bicubic resize of the last two dimensions."""
    wy = torch.from_numpy(resize_weights(img.shape[-2], height, a)).to(img)
    wx = torch.from_numpy(resize_weights(img.shape[-1], width, a)).to(img)
    return wy @ img @ wx.T


def degrade(hr: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Bicubic downsample by ``factor`` then upsample back, clamped to [0, 1]."""
    h, w = hr.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} is not divisible by degradation factor {factor}")
    small = resize(hr, h // factor, w // factor)
    return resize(small, h, w).clamp_(0.0, 1.0)


# ----------------------------------------------------------------------------
# dataset index


@dataclass
class DatasetIndex:
    root: str
    layout: str
    entries: list[tuple[str, list[str]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self, path: str | Path) -> None:
        data = {"root": self.root, "layout": self.layout,
                "entries": [{"id": k, "frames": v} for k, v in self.entries]}
        Path(path).write_text(json.dumps(data, indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> "DatasetIndex":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read index {path}: {exc}") from exc
        entries = [(e["id"], list(e["frames"])) for e in data["entries"]]
        if not entries:
            raise DataError(f"index {path} has no entries")
        return cls(data["root"], data["layout"], entries)


_IM_RE = re.compile(r"^im(\d+)\.png$")
_FRAME_RE = re.compile(r"^frame_(\d+)\.png$")


def index_dataset(root: str | Path, layout: str, list_file: str | Path | None = None) -> DatasetIndex:
    """Scan ``root`` for clips of the given layout, sorted by clip id."""
    root = Path(root)
    if layout not in LAYOUT_FRAMES:
        raise DataError(f"unknown layout {layout!r}")
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")

    wanted = None
    if list_file is not None:
        wanted = {ln.strip() for ln in Path(list_file).read_text().splitlines() if ln.strip()}

    if layout == "sequence":
        candidates = [d for d in root.iterdir() if d.is_dir()]
        pattern = _FRAME_RE
    else:
        base = root / "sequences" if (root / "sequences").is_dir() else root
        candidates = [d for d in base.rglob("*") if d.is_dir()]
        candidates = [d for d in candidates if any(_IM_RE.match(p.name) for p in d.iterdir())]
        pattern = _IM_RE

    entries = []
    need = LAYOUT_FRAMES[layout]
    for d in candidates:
        if layout == "sequence":
            clip_id = d.name
        else:
            clip_id = d.relative_to(base).as_posix()
        if wanted is not None and clip_id not in wanted:
            continue
        numbered = sorted((int(m.group(1)), p) for p in d.iterdir() if (m := pattern.match(p.name)))
        if layout == "sequence":
            ok = len(numbered) >= need
            frames = [str(p) for _, p in numbered]
        else:
            ok = [n for n, _ in numbered[:need]] == list(range(1, need + 1))
            frames = [str(p) for _, p in numbered[:need]]
        if not ok:
            log.warning("skipping %s: expected %s%d frames, found %d",
                        clip_id, "at least " if layout == "sequence" else "", need, len(numbered))
            continue
        entries.append((clip_id, frames))

    entries.sort(key=lambda e: e[0])
    if not entries:
        raise DataError(f"no valid {layout} entries under {root}")
    return DatasetIndex(str(root), layout, entries)


# ----------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    lr: torch.Tensor
    ref: torch.Tensor
    gt: torch.Tensor | None
    seq_id: str = ""
    frame: int = 0
    ref_offset: int = 1

    def __post_init__(self):
        shapes = {tuple(t.shape) for t in (self.lr, self.ref, self.gt) if t is not None}
        if len(shapes) != 1:
            raise ValueError(f"sample tensors disagree in shape: {sorted(shapes)}")
        if self.ref_offset not in (-1, 1):
            raise ValueError("ref_offset must be -1 or +1")


def _rotated_crop(frames: list[torch.Tensor], top: int, left: int, crop: int,
                  angle: float, flip: bool) -> list[torch.Tensor]:
    """Sample ``crop``x``crop`` windows rotated by ``angle`` degrees about their centre.

    Bilinear resampling with reflected borders; one grid is shared by all frames.
    """
    h, w = frames[0].shape[-2:]
    half = (crop - 1) / 2.0
    cy, cx = top + half, left + half
    d = torch.arange(crop, dtype=torch.float64) - half
    dv, du = torch.meshgrid(d, d, indexing="ij")
    if flip:
        du = -du
    th = math.radians(angle)
    c, s = math.cos(th), math.sin(th)
    x = cx + c * du - s * dv
    y = cy + s * du + c * dv
    grid = torch.stack([2 * x / (w - 1) - 1, 2 * y / (h - 1) - 1], dim=-1)[None]
    stack = torch.stack(frames).to(torch.float64)
    out = F.grid_sample(stack, grid.expand(len(frames), -1, -1, -1), mode="bilinear",
                        padding_mode="reflection", align_corners=True)
    return [t.to(frames[0].dtype).clamp_(0.0, 1.0) for t in out]


def make_training_sample(frames: list[torch.Tensor], rng: np.random.Generator, crop: int = 128,
                         factor: int = 4, seq_id: str = "") -> Sample:
    """Random centre frame, random neighbour as reference, shared crop/rotation/flip."""
    if len(frames) != 7:
        raise ValueError(f"expected 7 frames, got {len(frames)}")
    h, w = frames[0].shape[-2:]
    if h < crop or w < crop:
        raise ValueError(f"frames of size {h}x{w} are smaller than the {crop}x{crop} crop")

    t = int(rng.integers(2, 7))  # 1-based centre in 2..6
    offset = -1 if rng.random() < 0.5 else 1
    angle = float(rng.uniform(-10.0, 10.0))
    flip = bool(rng.random() < 0.2)

    # keep the rotated window inside the frame where possible
    th = math.radians(abs(angle))
    reach = math.ceil(crop / 2 * (math.cos(th) + math.sin(th)) - crop / 2)
    lo_y, hi_y = (reach, h - crop - reach) if h - crop >= 2 * reach else ((h - crop) // 2,) * 2
    lo_x, hi_x = (reach, w - crop - reach) if w - crop >= 2 * reach else ((w - crop) // 2,) * 2
    top = int(rng.integers(lo_y, hi_y + 1))
    left = int(rng.integers(lo_x, hi_x + 1))

    gt, ref = _rotated_crop([frames[t - 1], frames[t - 1 + offset]], top, left, crop, angle, flip)
    return Sample(lr=degrade(gt, factor), ref=ref, gt=gt, seq_id=seq_id, frame=t, ref_offset=offset)


def make_eval_sample(entry: tuple[str, list[str]], protocol: str, t: int | None = None,
                     factor: int = 4, size: tuple[int, int] | None = None) -> Sample:
    """Deterministic evaluation pair.

    septuplet: LR from frame 4, REF frame 5.  triplet: LR from frame 2, REF frame 3.
    sequence: LR from frame ``t`` (0-based), REF frame ``t + 1``; frames are
    first resized to ``size`` = (width, height) when given.
    """
    seq_id, paths = entry
    if protocol == "septuplet":
        gt_i, ref_i = 3, 4
    elif protocol == "triplet":
        gt_i, ref_i = 1, 2
    elif protocol == "sequence":
        if t is None:
            raise ValueError("sequence protocol needs a frame index")
        gt_i, ref_i = t, t + 1
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    if not 0 <= gt_i < ref_i < len(paths):
        raise IndexError(f"{seq_id}: frame {gt_i} has no following reference frame "
                         f"({len(paths)} frames)")
    gt, ref = read_frame(paths[gt_i]), read_frame(paths[ref_i])
    if protocol == "sequence" and size is not None:
        gt, ref = resize(gt, size[1], size[0]).clamp(0, 1), resize(ref, size[1], size[0]).clamp(0, 1)
    return Sample(lr=degrade(gt, factor), ref=ref, gt=gt, seq_id=seq_id, frame=gt_i + 1, ref_offset=1)


def eval_samples(index: DatasetIndex, protocol: str, factor: int = 4,
                 size: tuple[int, int] | None = None):
    """Yield every evaluation sample of ``index`` in index order."""
    for entry in index.entries:
        if protocol == "sequence":
            for t in range(len(entry[1]) - 1):
                yield make_eval_sample(entry, protocol, t, factor, size)
        else:
            yield make_eval_sample(entry, protocol, factor=factor)
