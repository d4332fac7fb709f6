"""Versioned checkpoint archive.

A checkpoint is a zip file holding ``config.json`` (the ModelConfig),
``manifest.json`` (format version, step counter and one record per array:
name, dtype, shape, member file) and one raw little-endian binary per array.
Archives are written with fixed timestamps so identical contents give
identical bytes.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ModelConfig, from_dict, to_dict

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    # optimizer state arrays, keyed "<slot>/<param name>"
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, step: int = 0, optimizer: torch.optim.Optimizer | None = None) -> "Checkpoint":
        params = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        opt = optimizer_arrays(model, optimizer) if optimizer is not None else {}
        return cls(model.cfg, params, step, opt)

    def build_model(self):
        from .network import HSTRNet

        model = HSTRNet(self.config)
        load_into(model, self.params)
        return model


def load_into(model, params: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    for name, arr in params.items():
        if name not in state:
            raise CheckpointError(f"parameter {name!r} is not defined for variant {model.cfg.variant!r}")
        if tuple(state[name].shape) != tuple(arr.shape):
            raise CheckpointError(f"parameter {name!r} has shape {tuple(arr.shape)}, "
                                  f"model expects {tuple(state[name].shape)}")
    missing = [k for k in state if k not in params]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]!r}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})


def optimizer_arrays(model, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            for slot, value in optimizer.state.get(p, {}).items():
                if torch.is_tensor(value):
                    out[f"{slot}/{names[id(p)]}"] = value.detach().cpu().numpy().copy()
    return out


def restore_optimizer(model, optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for key, arr in arrays.items():
        slot, name = key.split("/", 1)
        if name not in params:
            raise CheckpointError(f"optimizer state refers to unknown parameter {name!r}")
        optimizer.state[params[name]][slot] = torch.from_numpy(np.array(arr))


def _write_arrays(zf: zipfile.ZipFile, prefix: str, arrays: dict[str, np.ndarray]) -> list[dict]:
    records = []
    for i, (name, arr) in enumerate(arrays.items()):
        shape = np.shape(arr)  # ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        member = f"{prefix}/{i:05d}.bin"
        _writestr(zf, member, le.tobytes())
        records.append({"name": name, "dtype": le.dtype.str, "shape": list(shape), "file": member})
    return records


def _writestr(zf: zipfile.ZipFile, member: str, data: bytes | str) -> None:
    info = zipfile.ZipInfo(member, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _writestr(zf, "config.json", json.dumps(to_dict(ckpt.config), indent=1, sort_keys=True))
        manifest = {
            "version": ckpt.version,
            "step": ckpt.step,
            "params": _write_arrays(zf, "params", ckpt.params),
            "optimizer": _write_arrays(zf, "optimizer", ckpt.optimizer),
        }
        _writestr(zf, "manifest.json", json.dumps(manifest, indent=1))
    tmp.replace(path)


def _read_arrays(zf: zipfile.ZipFile, records: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for rec in records:
        raw = zf.read(rec["file"])
        dtype = np.dtype(rec["dtype"])
        shape = tuple(rec["shape"])
        if len(raw) != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"array {rec['name']!r} has {len(raw)} bytes, "
                                  f"expected {dtype.itemsize} x {shape}")
        out[rec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return out


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; if ``config`` is given, parameters must resolve against it."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            version = manifest.get("version")
            if version != FORMAT_VERSION:
                raise CheckpointError(f"{path}: checkpoint format version {version}, "
                                      f"this reader supports version {FORMAT_VERSION}")
            stored = from_dict(ModelConfig, json.loads(zf.read("config.json")))
            params = _read_arrays(zf, manifest["params"])
            optim = _read_arrays(zf, manifest.get("optimizer", []))
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError, ValueError) as exc:
        if isinstance(exc, (CheckpointError, ConfigError)):
            raise
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc

    cfg = config or stored
    from .network import HSTRNet

    expected = HSTRNet(cfg).state_dict()
    unresolved = [name for name in params if name not in expected]
    if unresolved:
        raise CheckpointError(f"{path}: parameter {unresolved[0]!r} cannot be resolved for variant {cfg.variant!r}")
    for name, arr in params.items():
        if tuple(expected[name].shape) != arr.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {arr.shape}, "
                                  f"config expects {tuple(expected[name].shape)}")
    missing = [k for k in expected if k not in params]
    if missing:
        raise CheckpointError(f"{path}: missing parameter {missing[0]!r}")
    return Checkpoint(cfg, params, int(manifest.get("step", 0)), optim, version)
