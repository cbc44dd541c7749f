"""Command-line entry point: ``tape <command> [flags]``.

Experiments are described by a JSON config; flags only choose paths and
override the seed. Every command that writes a file also writes the
effective configuration next to it as ``<file>.config.json``.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config
from .errors import TapeError
from .gradsuite import TOLERANCE, run_suite
from .imageio import read_ppm, write_ppm
from .pipeline import (
    compare_pretrain_effect,
    evaluate_set,
    finetune,
    init_checkpoint,
    input_report,
    make_eval_set,
    pretrain,
    restore_image,
)

COMMANDS = ("pretrain", "finetune", "eval", "restore", "compare", "gradcheck")


class UsageFailure(Exception):
    """A command was invoked without a flag it needs."""


def _config(args) -> TrainConfig:
    cfg = parse_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _config_for_ckpt(args, ckpt) -> TrainConfig:
    if args.config or args.seed is not None:
        return _config(args)
    return ckpt.config


def _require(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageFailure(f"'{args.command}' needs --{name}")


def _default_out(cfg: TrainConfig, name: str) -> Path:
    return Path(cfg.out_dir) / name


def _write(path: str | os.PathLike, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def _sidecar(path: str | os.PathLike, cfg: TrainConfig) -> None:
    _write(f"{path}.config.json", cfg.dumps())


def _save_run(path: Path, ckpt, log, cfg: TrainConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, path)
    _write(f"{path}.log.csv", log.to_csv())
    _sidecar(path, cfg)


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    out = Path(args.out) if args.out else _default_out(cfg, "pretrain.ckpt")
    init = load_checkpoint(args.ckpt) if args.ckpt else None
    start = time.perf_counter()
    ckpt, log = pretrain(cfg, init)
    _save_run(out, ckpt, log, cfg)
    seconds = time.perf_counter() - start
    if len(log) == 0:
        print(f"checkpoint already at iteration {ckpt.iteration}; nothing to do; checkpoint {out}")
        return
    l1 = log.column("l1")
    print(f"pretrained {len(log)} iterations in {seconds:.1f}s; "
          f"L1 first-50 {l1[:50].mean():.4f} -> last-50 {l1[-50:].mean():.4f}; checkpoint {out}")


def cmd_finetune(args) -> None:
    _require(args, "task")
    cfg = _config(args)
    init = load_checkpoint(args.ckpt) if args.ckpt else init_checkpoint(cfg)
    out = Path(args.out) if args.out else _default_out(cfg, f"finetune_{args.task}.ckpt")
    start = time.perf_counter()
    ckpt, log = finetune(cfg, init, args.task)
    _save_run(out, ckpt, log, cfg)
    print(f"fine-tuned on {args.task} ({cfg.finetune_mode}) for {len(log)} iterations in "
          f"{time.perf_counter() - start:.1f}s; final L1 {log.column('l1')[-1]:.4f}; checkpoint {out}")


def cmd_eval(args) -> None:
    _require(args, "ckpt")
    ckpt = load_checkpoint(args.ckpt)
    cfg = _config_for_ckpt(args, ckpt)
    tasks = [args.task] if args.task else cfg.tasks.names
    rows = ["task,images,input_psnr,psnr,ssim"]
    for task in tasks:
        pairs = make_eval_set(cfg, task)
        base = input_report(pairs, task)
        report = evaluate_set(ckpt, pairs, task)
        rows.append(f"{task},{report.count},{base.mean_psnr!r},{report.mean_psnr!r},{report.mean_ssim!r}")
        print(f"{task:>12}  input {base.mean_psnr:7.3f} dB  restored {report.mean_psnr:7.3f} dB  "
              f"SSIM {report.mean_ssim:.4f}  ({report.count} images)")
    if args.out:
        _write(args.out, "\n".join(rows) + "\n")
        _sidecar(args.out, cfg)


def cmd_restore(args) -> None:
    _require(args, "ckpt", "input", "output")
    ckpt = load_checkpoint(args.ckpt)
    image = read_ppm(args.input)
    restored = restore_image(ckpt, image)
    Path(args.output).parent.mkdir(parents=True, exist_ok=True)
    write_ppm(args.output, restored)
    _sidecar(args.output, ckpt.config)
    print(f"restored {args.input} ({image.shape[2]}x{image.shape[1]}) -> {args.output}")


def cmd_compare(args) -> None:
    _require(args, "task")
    cfg = _config(args)
    pretrained = load_checkpoint(args.ckpt) if args.ckpt else None
    report = compare_pretrain_effect(cfg, args.task, pretrained)
    print(report.table())
    out = args.out or _default_out(cfg, f"compare_{args.task}.csv")
    _write(out, report.to_csv())
    _sidecar(out, cfg)


def cmd_gradcheck(args) -> int:
    results = run_suite(seed=args.seed or 0)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.op:>14}  max rel err {r.max_error:.3e}  ({r.instances} instances, {r.seconds:.1f}s)  {status}")
    failed = [r.op for r in results if not r.passed]
    if failed:
        print(f"tape: error: gradient check above {TOLERANCE:g} for {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


HANDLERS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "restore": cmd_restore,
    "compare": cmd_compare,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tape", description="Prior-query transformer restoration experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--ckpt", help="input checkpoint")
    parser.add_argument("--out", help="output checkpoint or report path")
    parser.add_argument("--task", help="task name from the config's task set")
    parser.add_argument("--input", help="input PPM image (restore)")
    parser.add_argument("--output", help="output PPM image (restore)")
    parser.add_argument("--seed", type=int, help="override the master seed")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        status = HANDLERS[args.command](args)
    except (TapeError, UsageFailure, OSError, ValueError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"tape: error: {message}", file=sys.stderr)
        return 1
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
