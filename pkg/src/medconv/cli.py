"""Command-line entry point: ``medconv {gen-data,train,eval,sweep,report}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, PhantomConfig, VolumeFormatError, generate_phantoms
from .data.phantoms import class_counts
from .experiment import (
    TABLE4_GRID,
    TABLE5_GRID,
    NumericError,
    TrainConfig,
    compare_runs,
    evaluate_checkpoint,
    parse_grid,
    run_sweep,
    train,
)
from .model import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("medconv")


def cmd_gen_data(args) -> int:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"phantom config not found: {path}")
        try:
            config = PhantomConfig.from_json(path)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    else:
        config = PhantomConfig()
    if args.seed is not None:
        config.seed = args.seed
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = generate_phantoms(config, args.n, args.out)
    counts = class_counts(config, args.n)
    for k, (name, n) in enumerate(zip(config.class_names, counts)):
        print(f"class {k} {name}: {n}")
    print(f"manifest: {Path(args.out) / 'manifest.csv'} ({len(manifest.records)} samples)")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {
        "seed": args.seed,
        "loss": args.loss,
        "optimizer": args.optimizer,
        "tau1": args.tau1,
        "tau2": args.tau2,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "lr_schedule": args.lr_schedule,
        "window_level": args.window_level,
        "window_width": args.window_width,
        "out_dir": args.out,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.manifest:
        cfg.manifest = str(Path(args.manifest).resolve())
    for flag in ("oversample", "balaug", "augment", "windows"):
        if getattr(args, flag):
            setattr(cfg, flag, True)
    if args.window_level is not None or args.window_width is not None:
        cfg.windows = True
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    artifacts = train(cfg)
    row = artifacts.report.table_row()
    print(f"{cfg.run_name()} [{artifacts.config_hash}] " + " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    print(f"artifacts in {artifacts.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = TrainConfig.from_json(args.config) if args.config else None
    report, cached = evaluate_checkpoint(
        args.checkpoint, args.manifest, args.split, args.tau1, args.tau2, args.out,
        calibrate=not args.no_calibration, config=config,
    )
    source = "cached logits" if cached else "model pass"
    print(f"{args.split} ({source}): " + " ".join(f"{k}={v:.4f}" for k, v in report.table_row().items()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.grid is None:
        values = TABLE4_GRID if args.mode == "tied" else TABLE5_GRID
    else:
        values = parse_grid(args.grid)
    csv_path, md_path = run_sweep(args.logits, args.mode, values, args.tau1, args.out)
    print(md_path.read_text(), end="")
    print(f"written {csv_path} and {md_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    csv_path, md_path, warnings = compare_runs(args.run_dirs, args.out, args.split)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(md_path.read_text(), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medconv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--config", help="phantom config JSON (all fields optional)")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=750)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write run artifacts")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["ce", "balce"])
    p.add_argument("--optimizer", choices=["sgd", "sam", "schedulefree"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", choices=["constant", "cosine"])
    p.add_argument("--tau1", type=float)
    p.add_argument("--tau2", type=float)
    p.add_argument("--oversample", action="store_true")
    p.add_argument("--balaug", action="store_true")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--windows", action="store_true", help="use the bone window instead of the full CT range")
    p.add_argument("--window-level", type=float)
    p.add_argument("--window-width", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with logit adjustment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--tau1", type=float, default=1.0)
    p.add_argument("--tau2", type=float, default=0.5)
    p.add_argument("--no-calibration", action="store_true")
    p.add_argument("--config", help="training config to check against the checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="tau sweep over cached logits")
    p.add_argument("--logits", required=True, help="logits_<split>.npz from train or eval")
    p.add_argument("--mode", choices=["tied", "fixed_tau1"], default="fixed_tau1")
    p.add_argument("--grid", help="comma list or start:stop:step")
    p.add_argument("--tau1", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="compare run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
