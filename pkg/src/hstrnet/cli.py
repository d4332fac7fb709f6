"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 non-finite numerics, 5 invariant failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, from_dict, load_run_config, to_dict
from .data import DataError, DatasetIndex, degrade, index_dataset, load_image, save_image
from .evaluation import benchmark_latency, cascade_group, evaluate, psnr
from .network import HSTRNet
from .training import NonFiniteLossError, train

log = logging.getLogger("hstrnet")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INVARIANT = 2, 3, 4, 5


class InvariantFailure(RuntimeError):
    pass


def _write_resolved(out: Path, command: str, args: argparse.Namespace, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    argv = {k: v for k, v in vars(args).items() if k not in ("func", "config", "set", "replay")}
    payload = {"command": command, "args": argv, "config": to_dict(cfg)}
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=1, default=str))


def _load_model(path: str) -> HSTRNet:
    return load_checkpoint(path).build_model().eval()


def _index(args, cfg_path: str | None, layout: str) -> DatasetIndex:
    if getattr(args, "index", None) or cfg_path:
        return DatasetIndex.from_json(args.index or cfg_path)
    if getattr(args, "root", None):
        return index_dataset(args.root, layout)
    raise ConfigError("no dataset given: pass --index or --root")


def cmd_prepare_data(args, cfg: RunConfig) -> int:
    index = index_dataset(args.root, args.layout, args.list)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.to_json(out)
    _write_resolved(out.parent, "prepare-data", args, cfg)
    print(f"{len(index)} {args.layout} entries -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _write_resolved(out, "train", args, cfg)
    index = _index(args, cfg.train.index, "septuplet")
    model_cfg = from_dict(type(cfg.model), {**to_dict(cfg.model), "seed": cfg.seed})
    ckpt, tlog = train(cfg.train, index, model_cfg, seed=cfg.seed, out_dir=out, resume=args.resume)
    print(f"trained to step {ckpt.step}; last loss {tlog.losses[-1] if tlog.losses else float('nan'):.5f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    protocol = args.protocol or cfg.eval.protocol
    layout = protocol
    index = _index(args, cfg.eval.index, layout)
    model = _load_model(args.ckpt)
    size = tuple(cfg.eval.sequence_size) if cfg.eval.sequence_size else None
    space = args.metric_space or cfg.eval.metric_space
    report = evaluate(index, protocol, model, str(args.ckpt), space, model.cfg.degrade_factor, size)
    out = Path(args.out)
    report.write(out)
    _write_resolved(out, "eval", args, cfg)
    s = report.summary()
    print(f"{s['count']} samples: PSNR {s['psnr']:.3f} dB (input {s['baseline_psnr']:.3f}), "
          f"SSIM {s['ssim']:.4f}")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    lr, ref = load_image(args.lr), load_image(args.ref)
    if lr.shape != ref.shape:
        raise DataError(f"{args.lr} is {lr.shape[2]}x{lr.shape[1]} but {args.ref} is "
                        f"{ref.shape[2]}x{ref.shape[1]}")
    model = _load_model(args.ckpt)
    with torch.no_grad():
        out = model(lr[None], ref[None])[0]
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, out_path)
    _write_resolved(out_path.parent, "infer", args, cfg)
    if args.gt:
        gt = load_image(args.gt)
        if gt.shape != out.shape:
            raise DataError(f"{args.gt} does not match the output size")
        # score the written 8-bit frame
        print(f"PSNR {psnr(load_image(out_path), gt):.2f} dB")
    return 0


def _sequence_frames(path: Path) -> list[Path]:
    frames = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if len(frames) < 5:
        raise DataError(f"{path} has {len(frames)} frames; the 4x cascade needs at least 5")
    return frames


def cmd_upsample4x(args, cfg: RunConfig) -> int:
    paths = _sequence_frames(Path(args.sequence))
    model = _load_model(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for start in range(0, len(paths) - 4, 4):
        frames = [load_image(p) for p in paths[start:start + 5]]
        preds = cascade_group(frames, model, model.cfg.degrade_factor)
        for pos, (pred, gt) in enumerate(zip(preds, frames[1:4]), start=2):
            idx = start + pos - 1
            save_image(pred, out / f"frame_{idx:06d}.png")
            rows.append({"frame": idx, "group": start // 4, "position": pos, "psnr": psnr(pred, gt)})
    with open(out / "psnr.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "group", "position", "psnr"])
        writer.writeheader()
        writer.writerows(rows)
    _write_resolved(out, "upsample4x", args, cfg)
    print(f"{len(rows)} frames written to {out}")
    return 0


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"resolution {text!r} is not HxW") from exc
    return h, w


def cmd_bench(args, cfg: RunConfig) -> int:
    model = _load_model(args.ckpt) if args.ckpt else HSTRNet(cfg.model).eval()
    stats = benchmark_latency(model, _parse_resolution(args.resolution), args.iterations, seed=cfg.seed)
    print(json.dumps(stats, indent=1))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(stats, indent=1))
        _write_resolved(out, "bench", args, cfg)
    return 0


def cmd_selftest(args, cfg: RunConfig) -> int:
    from .selftest import run_selftest

    if not run_selftest(float64=args.float64, ckpt_path=args.ckpt):
        raise InvariantFailure("one or more invariants failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hstrnet", description=__doc__.splitlines()[0])
    parser.add_argument("--replay", help="re-run a command from its resolved_config.json")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. train.lr=1e-4")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    p = add("prepare-data", cmd_prepare_data, "index a dataset directory")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", choices=["septuplet", "triplet", "sequence"], required=True)
    p.add_argument("--list", help="file with one clip id per line")
    p.add_argument("--out", required=True, help="index JSON path")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--index", help="septuplet index JSON (or train.index in the config)")
    p.add_argument("--root", help="septuplet dataset root, indexed on the fly")
    p.add_argument("--resume")
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--protocol", choices=["septuplet", "triplet", "sequence"])
    p.add_argument("--index")
    p.add_argument("--root")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--metric-space", choices=["rgb", "y"])
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "super-resolve one LR frame with a reference")
    p.add_argument("--lr", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt")

    p = add("upsample4x", cmd_upsample4x, "4x frame-rate cascade over a frame directory")
    p.add_argument("--sequence", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)

    p = add("bench", cmd_bench, "single-frame latency")
    p.add_argument("--ckpt")
    p.add_argument("--resolution", default="256x448", help="HxW")
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--out")

    p = add("selftest", cmd_selftest, "run the invariant suite")
    p.add_argument("--float64", action="store_true", help="64-bit gradient checks (tolerance 1e-4)")
    p.add_argument("--ckpt", help="also verify that this checkpoint loads")
    return parser


def _replay(parser, path: str) -> list[str]:
    try:
        data = json.loads(Path(path).read_text())
        command, args, config = data["command"], data["args"], data["config"]
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot replay {path}: {exc}") from exc
    cfg_path = Path(path).with_name("replay_config.json")
    cfg_path.write_text(json.dumps(config))
    argv = [command, "--config", str(cfg_path)]
    for key, value in args.items():
        if key == "command" or value is None or value is False or key in ("verbose",):
            continue
        flag = "--" + key.replace("_", "-")
        argv += [flag] if value is True else [flag, str(value)]
    return argv


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.replay:
            args = parser.parse_args(_replay(parser, args.replay))
        if not args.command:
            parser.print_help()
            return EXIT_CONFIG
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_run_config(args.config, overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, OSError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantFailure as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
