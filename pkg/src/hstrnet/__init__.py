"""Reference-based video super-resolution: a low-resolution high-frame-rate stream
is upscaled with help from a high-resolution low-frame-rate reference camera."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ModelConfig, RunConfig, TrainConfig
from .data import degrade, index_dataset
from .evaluation import evaluate, psnr, ssim
from .network import HSTRNet, upsample_4x
from .training import train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "HSTRNet", "ModelConfig", "RunConfig", "TrainConfig",
    "degrade", "evaluate", "index_dataset", "load_checkpoint", "psnr", "save_checkpoint", "ssim",
    "train", "upsample_4x",
]
