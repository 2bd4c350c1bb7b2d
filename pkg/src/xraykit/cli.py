"""Command-line entry point: ``xraykit <stage> --config pipeline.ini``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .pipeline import STAGES, ConfigError, StageFailed, execute, load_config

log = logging.getLogger("xraykit")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI pipeline config; relative paths resolve against its directory")
    common.add_argument("--seed", type=int, help="top-level seed (overrides run.seed)")
    common.add_argument("--out", help="output directory (overrides paths.output)")
    common.add_argument("--threads", type=int, help="worker threads for prepare")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="xraykit", description="Smartphone chest-radiograph pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "parse labels, split train/val, write the label distribution",
        "prepare": "crop, normalize and resize images (augment the train split)",
        "train": "train the classifier head on feature vectors",
        "eval": "tune thresholds on validation and report test metrics",
        "detect-eval": "average precision and agreement for radiograph boxes",
        "run": "all stages the config supports, in order",
    }
    for name in [*STAGES, "run"]:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name == "prepare":
            p.add_argument("--inference", action="store_true", help="disable augmentation for every split")
        if name == "eval":
            p.add_argument("--threshold-mode", choices=("auto-youden", "fixed", "file"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(name)s: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(
            args.config,
            seed=args.seed,
            output=args.out,
            threads=args.threads,
            threshold_mode=getattr(args, "threshold_mode", None),
            augment_train=False if getattr(args, "inference", False) else None,
        )
        results = execute(cfg, args.command)
    except ConfigError as exc:
        print(f"xraykit: config error: {exc}", file=sys.stderr)
        return 2
    except StageFailed as exc:
        print(f"xraykit: stage {exc.stage} failed: {type(exc.cause).__name__}: {exc.cause}", file=sys.stderr)
        return 1
    for r in results:
        log.info("%s: inputs=%d outputs=%d skipped=%d", r.stage, r.inputs, r.outputs, r.skipped)
    return 0


if __name__ == "__main__":
    sys.exit(main())
