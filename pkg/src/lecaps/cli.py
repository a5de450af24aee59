"""Command-line interface.

Subcommands: train, eval, bench, params, gen-data. Exit codes: 0 success,
2 usage errors (argparse), 3 missing file or unreadable data, 4 invalid
configuration, 5 checkpoint/model mismatch, 6 training diverged.
"""

from __future__ import annotations

import argparse
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .config import ConfigError, DataConfig, RunConfig, dump_run_config, load_run_config
from .data import DATASET_NAMES, DataError, load_dataset, synthetic_digits, write_idx_images, write_idx_labels
from .models import ModelConfig, build_model, expected_primary_caps
from .trainer import (
    AdamOptimizer,
    CheckpointMismatch,
    TrainingDiverged,
    apply_checkpoint,
    checkpoint_from,
    evaluate,
    load_checkpoint,
    metrics_to_csv,
    model_from_checkpoint,
    save_checkpoint,
    single_thread,
    train,
)

__all__ = ["main", "build_parser"]

# (image_size, in_channels) implied by each dataset
DATASET_GEOMETRY = {
    "mnist": (28, 1),
    "fmnist": (28, 1),
    "synthetic": (28, 1),
    "cifar10": (32, 3),
    "expanded-mnist": (40, 1),
    "affine-test": (40, 1),
}

EXIT_OK = 0
EXIT_MISSING_FILE = 3
EXIT_BAD_CONFIG = 4
EXIT_CHECKPOINT_MISMATCH = 5
EXIT_DIVERGED = 6


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lecaps",
        description="Train and benchmark capsule networks.",
        epilog="Exit codes: 0 ok, 2 usage, 3 missing file, 4 bad config, 5 checkpoint mismatch, 6 diverged.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=str, default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
        p.add_argument("--model", choices=("baseline", "lecaps"), default=None)
        p.add_argument("--dataset", choices=DATASET_NAMES, default=None)
        p.add_argument("--data-dir", type=str, default=None)
        p.add_argument("--train-limit", type=int, default=None)
        p.add_argument("--test-limit", type=int, default=None)
        p.add_argument("--synthetic-fallback", action="store_true", help="use generated digits when files are missing")
        p.add_argument("--batch-size", type=int, default=None)

    p_train = sub.add_parser("train", help="train a model and write metrics + checkpoint")
    add_common(p_train)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--lr", type=float, default=None)
    p_train.add_argument("--gamma", type=float, default=None)
    p_train.add_argument("--width", type=float, default=None, help="channel multiplier (lecaps)")
    p_train.add_argument("--routing-iters", type=int, default=None)
    p_train.add_argument("--decoder", choices=("fc", "deconv"), default=None)
    p_train.add_argument("--dropout-rate", type=float, default=None)
    p_train.add_argument("--hard-training", action="store_true", help="second round with tightened margins")
    p_train.add_argument("--checkpoint", type=str, default=None, help="resume from this checkpoint")
    p_train.add_argument("--out-dir", type=str, default="runs/latest")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p_eval)
    p_eval.add_argument("--checkpoint", type=str, required=True)

    p_bench = sub.add_parser("bench", help="time train/inference batches")
    add_common(p_bench)
    p_bench.add_argument("--both", action="store_true", help="benchmark baseline and lecaps, report ratios")
    p_bench.add_argument("--warmup", type=int, default=1)
    p_bench.add_argument("--iters", type=int, default=3)
    p_bench.add_argument("--repeats", type=int, default=3)
    p_bench.add_argument("--width", type=float, default=None)
    p_bench.add_argument("--out-dir", type=str, default=None, help="also write bench.csv here")

    p_params = sub.add_parser("params", help="print parameter and capsule counts")
    add_common(p_params)
    p_params.add_argument("--width", type=float, default=None)
    p_params.add_argument("--decoder", choices=("fc", "deconv"), default=None)

    p_gen = sub.add_parser("gen-data", help="write synthetic digits as IDX files")
    p_gen.add_argument("--out-dir", type=str, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--train-count", type=int, default=5000)
    p_gen.add_argument("--test-count", type=int, default=1000)

    return parser


def _resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """File config (if any) overridden by whichever flags were passed."""
    cfg = load_run_config(args.config) if args.config else RunConfig()

    model_over = {}
    for flag, key in (("model", "variant"), ("routing_iters", "routing_iters"), ("decoder", "decoder"), ("width", "width")):
        value = getattr(args, flag, None)
        if value is not None:
            model_over[key] = value
    # Geometry always follows the dataset; [model] image_size in a file is
    # only a fallback for dataset-free commands and gets overridden here.
    dataset = args.dataset if args.dataset is not None else cfg.data.dataset
    size, channels = DATASET_GEOMETRY[dataset]
    model_over["image_size"] = size
    model_over["in_channels"] = channels
    dropout = getattr(args, "dropout_rate", None)
    if dropout is not None:
        model_over["dropout_rate"] = dropout

    train_over = {}
    for flag in ("seed", "batch_size", "epochs", "lr", "gamma"):
        value = getattr(args, flag, None)
        if value is not None:
            train_over[flag] = value
    if getattr(args, "hard_training", False):
        train_over["hard_training"] = True
    if args.deterministic:
        train_over["deterministic"] = True

    data_over = {"dataset": dataset}
    if args.data_dir is not None:
        data_over["data_dir"] = args.data_dir
    if args.train_limit is not None:
        data_over["train_limit"] = args.train_limit
    if args.test_limit is not None:
        data_over["test_limit"] = args.test_limit
    if args.synthetic_fallback:
        data_over["synthetic_fallback"] = True

    try:
        return RunConfig(
            model=replace(cfg.model, **model_over),
            train=replace(cfg.train, **train_over),
            loss=cfg.loss,
            data=replace(cfg.data, **data_over),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _load_splits(cfg: RunConfig):
    return load_dataset(
        cfg.data.dataset,
        cfg.data.data_dir,
        cfg.data.train_limit,
        cfg.data.test_limit,
        seed=cfg.train.seed,
        synthetic_fallback=cfg.data.synthetic_fallback,
    )


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_run_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_split, test_split = _load_splits(cfg)

    rng = np.random.default_rng(cfg.train.seed)
    model = build_model(cfg.model, rng)
    optimizer = None
    start_epoch = 0
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        optimizer = AdamOptimizer(list(model.named_parameters()))
        rng = apply_checkpoint(model, optimizer, ckpt)
        start_epoch = ckpt.epoch
        print(f"resumed from {args.checkpoint} at epoch {start_epoch}")

    def on_epoch(stats) -> None:
        print(
            f"epoch {stats.epoch}: train_loss={stats.train_loss:.4f} "
            f"test_acc={stats.test_acc:.4f} lr={stats.lr:.6f} ({stats.epoch_seconds:.1f}s)"
        )

    guard = single_thread() if cfg.train.deterministic else nullcontext()
    with guard:
        history, optimizer, rng = train(
            model,
            train_split,
            test_split,
            cfg.train,
            loss_params=cfg.loss,
            on_epoch=on_epoch,
            rng=rng,
            optimizer=optimizer,
            start_epoch=start_epoch,
        )

    (out_dir / "metrics.csv").write_text(metrics_to_csv(history))
    (out_dir / "resolved-config.ini").write_text(dump_run_config(cfg))
    final_epoch = history[-1].epoch + 1 if history else start_epoch
    save_checkpoint(out_dir / "model.ckpt", checkpoint_from(model, optimizer, final_epoch, rng, cfg.train))
    print(f"wrote {out_dir / 'metrics.csv'}, {out_dir / 'model.ckpt'}, {out_dir / 'resolved-config.ini'}")
    if history:
        print(f"final test accuracy: {history[-1].test_acc:.4f}")
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = model_from_checkpoint(ckpt)
    cfg = _resolve_run_config(args)
    geometry = DATASET_GEOMETRY[cfg.data.dataset]
    if (model.config.image_size, model.config.in_channels) != geometry:
        raise CheckpointMismatch(
            f"checkpoint expects {model.config.image_size}x{model.config.image_size}x{model.config.in_channels} "
            f"inputs but dataset {cfg.data.dataset!r} provides {geometry[0]}x{geometry[0]}x{geometry[1]}"
        )
    _, test_split = _load_splits(cfg)
    guard = single_thread() if args.deterministic else nullcontext()
    with guard:
        acc = evaluate(model, test_split, cfg.train.batch_size)
    print(f"dataset={cfg.data.dataset} n={len(test_split)} accuracy={acc:.4f}")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    cfg = _resolve_run_config(args)
    batch = cfg.train.batch_size
    size, channels = DATASET_GEOMETRY[cfg.data.dataset]

    def config_for(variant: str) -> ModelConfig:
        decoder = "fc" if variant == "baseline" else "deconv"
        width = args.width if args.width is not None else cfg.model.width
        return replace(cfg.model, variant=variant, decoder=decoder, image_size=size, in_channels=channels, width=width)

    variants = ("baseline", "lecaps") if args.both else (cfg.model.variant,)
    reports = []
    for variant in variants:
        report = bench_mod.benchmark(
            config_for(variant),
            batch_size=batch,
            warmup=args.warmup,
            iters=args.iters,
            repeats=args.repeats,
            seed=cfg.train.seed,
            deterministic=args.deterministic or cfg.train.deterministic,
        )
        reports.append(report)
        print(bench_mod.report_text(report))
    if len(reports) == 2:
        base, le = reports
        print(f"train_median_ratio={le.train_median / base.train_median:.3f}")
        print(f"infer_median_ratio={le.infer_median / base.infer_median:.3f}")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench.csv").write_text(bench_mod.report_csv(reports))
        print(f"wrote {out_dir / 'bench.csv'}")
    return EXIT_OK


def _cmd_params(args: argparse.Namespace) -> int:
    cfg = _resolve_run_config(args)
    print(f"model={cfg.model.variant}")
    print(f"geometry={cfg.model.image_size}x{cfg.model.image_size}x{cfg.model.in_channels}")
    print(f"param_count={bench_mod.count_params(cfg.model)}")
    print(f"primary_caps={expected_primary_caps(cfg.model)}")
    return EXIT_OK


def _cmd_gen_data(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for prefix, count, seed in (
        ("train", args.train_count, args.seed),
        ("t10k", args.test_count, args.seed + 1),
    ):
        split = synthetic_digits(count, seed=seed, image_size=28)
        images = np.round(split.images[:, 0] * 255.0).astype(np.uint8)
        write_idx_images(out_dir / f"{prefix}-images-idx3-ubyte", images)
        write_idx_labels(out_dir / f"{prefix}-labels-idx1-ubyte", split.labels)
    print(f"wrote IDX files for {args.train_count}+{args.test_count} synthetic digits to {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "params": _cmd_params,
    "gen-data": _cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except CheckpointMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT_MISMATCH
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
