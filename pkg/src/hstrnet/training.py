"""L1 training loop with seeded sampling, checkpointing and a JSONL step log."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from .checkpoint import Checkpoint, load_checkpoint, restore_optimizer, save_checkpoint
from .config import ModelConfig, TrainConfig, derive_seed
from .data import DatasetIndex, make_training_sample, read_frame
from .network import HSTRNet

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, sample_ids: list[str], value: float):
        super().__init__(f"non-finite loss {value} at step {step} (samples: {', '.join(sample_ids)})")
        self.step = step
        self.sample_ids = sample_ids


def l1_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")
    return (pred - gt).abs().mean()


class SeptupletTrainSet(Dataset):
    """Augmented samples; item ``i`` depends only on (seed, clip id, epoch)."""

    def __init__(self, index: DatasetIndex, seed: int, crop: int, factor: int):
        if index.layout != "septuplet":
            raise ValueError(f"training needs a septuplet index, got {index.layout!r}")
        self.index = index
        self.seed = seed
        self.crop = crop
        self.factor = factor
        self.epoch = 0

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i):
        seq_id, paths = self.index.entries[i]
        rng = np.random.default_rng(derive_seed(self.seed, seq_id, self.epoch))
        s = make_training_sample([read_frame(p) for p in paths], rng, self.crop, self.factor, seq_id)
        return s.lr, s.ref, s.gt, seq_id


def _collate(items):
    lr, ref, gt, ids = zip(*items)
    return torch.stack(lr), torch.stack(ref), torch.stack(gt), list(ids)


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    ms: list[float] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)

    def tail_mean(self, n: int) -> float:
        return sum(self.losses[-n:]) / len(self.losses[-n:])


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.use_deterministic_algorithms(True)


def train(cfg: TrainConfig, index: DatasetIndex, model_cfg: ModelConfig | None = None, seed: int = 0,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          model: HSTRNet | None = None) -> tuple[Checkpoint, TrainLog]:
    """Optimise the L1 reconstruction loss with Adam; returns the final checkpoint and the log.

    Checkpoints go to ``out_dir/ckpt_<step>.hstr`` every ``cfg.ckpt_interval``
    steps plus ``final.hstr``; the step log is ``out_dir/train_log.jsonl``.
    """
    if len(index) == 0:
        raise ValueError("training index is empty")
    set_determinism(seed)
    model_cfg = model_cfg or ModelConfig(seed=seed)

    start_step = 0
    resumed = None
    if resume is not None:
        resumed = load_checkpoint(resume)
        model = resumed.build_model()
        model_cfg = resumed.config
        start_step = resumed.step
    elif model is None:
        model = HSTRNet(model_cfg)

    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), weight_decay=0.0)
    if resumed is not None and resumed.optimizer:
        restore_optimizer(model, optimizer, resumed.optimizer)

    dataset = SeptupletTrainSet(index, seed, cfg.crop, model_cfg.degrade_factor)
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resumed else "w")

    tlog = TrainLog()
    model.train()
    step = start_step
    try:
        while step < total:
            epoch = step // per_epoch
            dataset.epoch = epoch
            order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(len(dataset))
            batches = [order[i:i + cfg.batch_size].tolist() for i in range(0, len(order), cfg.batch_size)]
            batches = batches[step - epoch * per_epoch:]
            loader = DataLoader(dataset, batch_sampler=batches, collate_fn=_collate, num_workers=cfg.workers)
            epoch_losses = []
            for lr, ref, gt, ids in loader:
                t0 = time.perf_counter()
                pred = model.predict(lr, ref)
                loss = l1_loss(pred.raw, gt)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteLossError(step, ids, value)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                optimizer.step()
                step += 1
                ms = (time.perf_counter() - t0) * 1e3
                tlog.steps.append(step)
                tlog.losses.append(value)
                tlog.ms.append(ms)
                epoch_losses.append(value)
                if log_fh is not None:
                    log_fh.write(json.dumps({"step": step, "loss": value, "ms": round(ms, 3)}) + "\n")
                if out is not None and cfg.ckpt_interval and step % cfg.ckpt_interval == 0:
                    save_checkpoint(Checkpoint.from_model(model, step, optimizer), out / f"ckpt_{step:08d}.hstr")
                if step >= total:
                    break
            if epoch_losses:
                tlog.epoch_means.append(sum(epoch_losses) / len(epoch_losses))
                log.info("epoch %d: mean loss %.5f", epoch, tlog.epoch_means[-1])
    finally:
        if log_fh is not None:
            log_fh.close()

    ckpt = Checkpoint.from_model(model, step, optimizer)
    if out is not None:
        save_checkpoint(ckpt, out / "final.hstr")
    model.eval()
    return ckpt, tlog
