"""Procedural toy clips: textured canvases panned by a constant integer velocity."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw


def _canvas(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    img = np.zeros((h, w, 3))
    for cell, amp in ((32, 0.35), (8, 0.2), (2, 0.1)):
        coarse = rng.random((h // cell + 2, w // cell + 2, 3))
        up = np.stack([np.asarray(Image.fromarray(coarse[..., c].astype(np.float32), "F")
                                  .resize((w + 2 * cell, h + 2 * cell), Image.BICUBIC))
                       for c in range(3)], -1)
        img += amp * up[cell:cell + h, cell:cell + w]
    pil = Image.fromarray(np.clip(img / 0.65 * 255, 0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    for _ in range(int(h * w / 400)):
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        sx, sy = int(rng.integers(3, 18)), int(rng.integers(3, 18))
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        if rng.random() < 0.5:
            draw.rectangle([x0, y0, x0 + sx, y0 + sy], fill=color)
        else:
            draw.ellipse([x0, y0, x0 + sx, y0 + sy], fill=color)
    for _ in range(int(h * w / 2000)):
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        draw.line([x0, y0, x0 + int(rng.integers(-40, 40)), y0 + int(rng.integers(-40, 40))],
                  fill=color, width=int(rng.integers(1, 3)))
    return np.asarray(pil)


def make_clip(rng: np.random.Generator, n_frames: int, height: int, width: int,
              max_speed: int = 2) -> list[np.ndarray]:
    """``n_frames`` uint8 frames of a canvas panned by a random integer velocity."""
    margin = max_speed * n_frames + 2
    canvas = _canvas(rng, height + 2 * margin, width + 2 * margin)
    while True:
        vx, vy = (int(v) for v in rng.integers(-max_speed, max_speed + 1, 2))
        if vx or vy:
            break
    y0 = margin - (vy * (n_frames - 1)) // 2
    x0 = margin - (vx * (n_frames - 1)) // 2
    return [canvas[y0 + k * vy:y0 + k * vy + height, x0 + k * vx:x0 + k * vx + width].copy()
            for k in range(n_frames)]


def write_toy_corpus(root: str | Path, layout: str = "septuplet", n_clips: int = 4,
                     size: tuple[int, int] = (96, 96), n_frames: int | None = None,
                     seed: int = 0, max_speed: int = 2) -> Path:
    """Write clips in the septuplet/triplet (``sequences/<seq>/<clip>/imN.png``)
    or frame-sequence (``<seq>/frame_%06d.png``) layout. ``size`` is (height, width)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    count = n_frames or {"septuplet": 7, "triplet": 3, "sequence": 9}[layout]
    for i in range(n_clips):
        frames = make_clip(rng, count, size[0], size[1], max_speed)
        if layout == "sequence":
            d = root / f"{i + 1:05d}"
            names = [f"frame_{k:06d}.png" for k in range(count)]
        else:
            d = root / "sequences" / f"{i + 1:05d}" / "0001"
            names = [f"im{k + 1}.png" for k in range(count)]
        d.mkdir(parents=True, exist_ok=True)
        for name, frame in zip(names, frames):
            Image.fromarray(frame).save(d / name)
    return root
