"""Command-line entry point: ``stainstyle <command> [--flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Training flags
override values from ``--config``, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import colorops
from .data import DataError, StainStyleParams, load_manifest, make_synthetic_benchmark, read_png, write_manifest, write_png
from .evaluation import ComparisonTable, comparison_report, evaluate
from .losses import LossWeights
from .training import (
    SSTTransfer,
    TrainConfig,
    apply_sst,
    load_checkpoint,
    save_checkpoint,
    train_classifier,
    train_sst,
)

BASELINES = ("reinhard", "macenko", "hs")


def _counts(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"counts must be three integers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("counts must be train,val,test")
    return parts


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", required=True, help="training manifest CSV")
    p.add_argument("--val", required=True, help="validation manifest CSV")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--history", help="write per-epoch history as JSON lines")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainstyle", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic two-institute benchmark")
    p.add_argument("--style-a", required=True, help="style JSON for train/val (institute A)")
    p.add_argument("--style-b", required=True, help="style JSON for test (institute B)")
    p.add_argument("--counts", type=_counts, default=(2000, 400, 1000), help="train,val,test (even numbers)")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-classifier", help="train the tumor classifier")
    _add_train_flags(p)
    p.add_argument("--width", type=int, help="classifier base width")

    p = sub.add_parser("train-sst", help="train the stain-style generator")
    _add_train_flags(p)
    p.add_argument("--classifier", required=True)
    p.add_argument("--lambda-recon", type=float)
    p.add_argument("--lambda-fp", type=float)
    p.add_argument("--d-steps", type=int, help="discriminator steps per generator step")
    p.add_argument("--width", type=int, help="generator base width")

    p = sub.add_parser("transfer", help="recolor one PNG tile")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--generator", help="generator checkpoint")
    g.add_argument("--baseline", help="fitted baseline JSON (from fit-baseline)")

    p = sub.add_parser("evaluate", help="metrics of a classifier on a manifest")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--generator")
    g.add_argument("--baseline")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("compare", help="comparison table across transfer methods")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True, help="manifest of the shifted-style test set")
    p.add_argument("--methods", default="sst,macenko,reinhard,hs,identity")
    p.add_argument("--generator", help="generator checkpoint (needed for sst)")
    p.add_argument("--target-data", help="target-style manifest used to fit the baselines")
    p.add_argument("--per-tile", action="store_true", help="fit baselines on a single target tile")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("fit-baseline", help="fit a baseline target from a target-style manifest")
    p.add_argument("--method", choices=BASELINES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-tiles", type=int, default=256)
    p.add_argument("--per-tile", action="store_true", help="fit on the first tile only")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _train_config(args, **extra) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "seed": args.seed,
        "checkpoint_dir": args.checkpoint_dir,
        **extra,
    }
    return cfg.replace(**{k: v for k, v in changes.items() if v is not None})


def _fit(method: str, images: np.ndarray, per_tile: bool, max_tiles: int = 256, seed: int = 0):
    if per_tile:
        return colorops.fit_baseline(method, images[:1], max_tiles=1)
    return colorops.fit_baseline(method, images, max_tiles=max_tiles, seed=seed)


def cmd_synth_data(args) -> None:
    style_a = StainStyleParams.load(args.style_a)
    style_b = StainStyleParams.load(args.style_b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in make_synthetic_benchmark(style_a, style_b, *args.counts, d=args.d, seed=args.seed):
        print(write_manifest(ds, out))


def cmd_train_classifier(args) -> None:
    extra = {"classifier_width": args.width} if args.width else {}
    cfg = _train_config(args, **extra)
    model, history = train_classifier(load_manifest(args.train, "train"), load_manifest(args.val, "val"), cfg)
    save_checkpoint(model, args.out)
    if args.history:
        history.write_jsonl(args.history)
    print(f"best val AUC {max(history.column('val_auc')):.4f}; saved {args.out}")


def cmd_train_sst(args) -> None:
    cfg = _train_config(args, d_steps_per_g_step=args.d_steps, generator_width=args.width)
    if args.lambda_recon is not None or args.lambda_fp is not None:
        w = cfg.loss_weights
        cfg = cfg.replace(loss_weights=LossWeights(
            w.lambda_recon if args.lambda_recon is None else args.lambda_recon,
            w.lambda_fp if args.lambda_fp is None else args.lambda_fp,
        ))
    classifier = load_checkpoint(args.classifier)
    g, history = train_sst(load_manifest(args.train, "train"), load_manifest(args.val, "val"), classifier, cfg)
    save_checkpoint(g, args.out)
    if args.history:
        history.write_jsonl(args.history)
    print(f"best val total loss {min(history.column('val_total')):.4f}; saved {args.out}")


def _transfer_from_args(generator: str | None, baseline: str | None):
    if generator:
        return SSTTransfer(load_checkpoint(generator))
    if baseline:
        target = colorops.load_target(baseline)
        return lambda tile: colorops.apply_baseline(target, tile)
    return None


def cmd_transfer(args) -> None:
    tile = read_png(args.input)
    if args.generator:
        out = apply_sst(load_checkpoint(args.generator), tile)
    else:
        out = colorops.apply_baseline(colorops.load_target(args.baseline), tile)
    write_png(out, args.out)


def cmd_evaluate(args) -> None:
    classifier = load_checkpoint(args.classifier)
    transfer = _transfer_from_args(args.generator, args.baseline)
    name = "sst" if args.generator else Path(args.baseline).stem if args.baseline else "identity"
    report = evaluate(classifier, load_manifest(args.data, "test"), transfer, args.threshold, name)
    if args.json:
        print(json.dumps([report.to_json()], indent=2))
    else:
        print(ComparisonTable([report]).render())


def cmd_compare(args) -> None:
    classifier = load_checkpoint(args.classifier)
    data = load_manifest(args.data, "test")
    names = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = set(names) - {"sst", "identity", *BASELINES}
    if unknown:
        raise UsageError(f"unknown methods: {', '.join(sorted(unknown))}")
    target_images = None
    if any(m in BASELINES for m in names):
        if not args.target_data:
            raise UsageError("--target-data is required to fit reinhard/macenko/hs")
        target_images = load_manifest(args.target_data, "train").images
    methods = {}
    for name in names:
        if name == "identity":
            methods[name] = None
        elif name == "sst":
            methods[name] = SSTTransfer(load_checkpoint(args.generator)) if args.generator else _missing("--generator")
        else:
            target = _fit(name, target_images, args.per_tile, seed=args.seed)
            methods[name] = lambda tile, target=target: colorops.apply_baseline(target, tile)
    table = comparison_report(classifier, data, methods, args.threshold)
    print(table.dumps() if args.json else table.render())


def _missing(flag: str):
    def fail(tile):
        raise ValueError(f"{flag} not given")
    return fail


def cmd_fit_baseline(args) -> None:
    images = load_manifest(args.data, "train").images
    target = _fit(args.method, images, args.per_tile, args.max_tiles, args.seed)
    colorops.save_target(target, args.out)
    print(f"saved {args.method} target to {args.out}")


class UsageError(Exception):
    pass


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-classifier": cmd_train_classifier,
    "train-sst": cmd_train_sst,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "fit-baseline": cmd_fit_baseline,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.manual_seed(getattr(args, "seed", None) or 0)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"stainstyle {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"stainstyle {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
