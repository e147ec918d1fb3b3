"""Command-line entry point.

Subcommands: generate, augment, train, eval, ablate, report. Exit codes:
0 success, 2 validation error, 3 IO error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import NumericError, ValidationError
from .harness import (
    ExperimentConfig,
    cmd_ablate,
    cmd_augment,
    cmd_eval,
    cmd_generate,
    cmd_report,
    cmd_train,
    load_experiment_config,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_experiment_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fuseseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("generate", help="build the synthetic benchmark on disk")
    add_common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset output directory")

    p = sub.add_parser("augment", help="append instrument-occluded duplicates of eligible train cases")
    add_common(p)
    p.add_argument("--dataset", type=Path, required=True)

    p = sub.add_parser("train", help="train and keep the best-on-validation checkpoint")
    add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--macro", action="store_true", help="also report per-frame macro dice")

    p = sub.add_parser("ablate", help="run the 2x2 fusion x augmentation grid")
    add_common(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    p = sub.add_parser("report", help="render metrics/ablation JSON or a train log as text")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--plot", action="store_true", help="emit a loss-curve image (train logs)")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            entries = cmd_generate(_load_config(args), args.out)
            print(f"wrote {len(entries)} cases to {args.out}")
        elif args.command == "augment":
            summary = cmd_augment(_load_config(args), args.dataset)
            print(f"augmented {summary['added']} of {summary['eligible']} eligible train cases")
        elif args.command == "train":
            result = cmd_train(_load_config(args), args.dataset, args.out)
            print(
                f"trained {result.steps} steps; best val mean dice {result.best_val_dice:.4f}; "
                f"checkpoint at {result.checkpoint_path}"
            )
        elif args.command == "eval":
            report = cmd_eval(
                args.checkpoint, args.dataset, args.split, args.out, macro=args.macro
            )
            print(json.dumps({"mean_dice": report["mean_dice"], "miou": report["miou"]}))
        elif args.command == "ablate":
            grid = cmd_ablate(_load_config(args), args.dataset, args.out, seeds=args.seeds)
            from .harness import format_ablation_table

            print(format_ablation_table(grid), end="")
        elif args.command == "report":
            print(cmd_report(args.input, args.out, plot=args.plot), end="")
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
