"""Command-line entry point (``avmtl``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import PipelineConfig, load_config
from .errors import CheckpointError, ConfigError, DataError
from .synthetic import SynthConfig, write_synthetic_dataset

logger = logging.getLogger("avmtl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
_ALTERNATION = {"epoch": "epoch_by_epoch", "batch": "batch_by_batch"}

# Training settings written into a synthetic corpus's config. The backbone
# starts from random weights, so it needs a larger step than the pretrained
# default and per-batch alternation to keep both heads moving in few epochs.
SYNTH_TRAINING = {
    "visual_lr": 0.05,
    "visual_epochs": 16,
    "alternation": "batch_by_batch",
    "seq_steps": 200,
}


def write_synth_config(root: Path, dirs: dict[str, Path], seed: int) -> Path:
    cfg = PipelineConfig(**{k: str(v.relative_to(root)) for k, v in dirs.items()},
                         out_dir="run", seed=seed, **SYNTH_TRAINING)
    path = root / "pipeline.cfg"
    path.write_text("# synthetic corpus; paths are relative to this file\n" + cfg.to_text())
    return path


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="master seed (stage seeds derive from it)")
    common.add_argument("--alternation", choices=sorted(_ALTERNATION), help="visual head rotation")
    common.add_argument("--out", type=str, help="output directory")
    common.add_argument("--workers", type=int, help="torch threads; >1 gives up bitwise reproducibility")
    common.add_argument("--threshold", type=float, help="AU decision threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="avmtl", description="Audio-visual multi-task AU / expression pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare-data", parents=[common], help="parse, clean and deduplicate annotations")
    sub.add_parser("train-visual", parents=[common], help="alternating multi-task visual training")
    sub.add_parser("train-audio-sequence", parents=[common], help="train TDNN + sequence model on a frozen visual model")
    ev = sub.add_parser("evaluate", parents=[common], help="inference and metric reports")
    ev.add_argument("--split", choices=("val", "train"), default="val")
    sub.add_parser("stats", parents=[common], help="print label balance of the training annotations")
    syn = sub.add_parser("synth", parents=[common], help="write a synthetic corpus and its config")
    syn.add_argument("--videos", type=int, default=SynthConfig.n_videos)
    syn.add_argument("--val-videos", type=int, default=SynthConfig.n_val_videos)
    syn.add_argument("--frames", type=int, default=SynthConfig.frames_per_video)
    return parser


def resolve_config(args) -> PipelineConfig:
    return load_config(
        args.config,
        seed=args.seed,
        alternation=_ALTERNATION.get(args.alternation) if args.alternation else None,
        out_dir=args.out,
        workers=args.workers,
        threshold=args.threshold,
    )


def run(args) -> int:
    from . import pipeline

    if args.command == "synth":
        if args.out is None:
            raise ConfigError("synth needs --out DIR for the corpus")
        root = Path(args.out)
        seed = 0 if args.seed is None else args.seed
        dirs = write_synthetic_dataset(root, SynthConfig(args.videos, args.val_videos, args.frames), seed)
        print(write_synth_config(root, dirs, seed))
        return EXIT_OK

    cfg = resolve_config(args)
    if args.command == "prepare-data":
        report = pipeline.cmd_prepare_data(cfg)
        print(json.dumps(report["removed_count"], sort_keys=True))
    elif args.command == "train-visual":
        print(json.dumps(pipeline.cmd_train_visual(cfg), sort_keys=True))
    elif args.command == "train-audio-sequence":
        print(json.dumps(pipeline.cmd_train_sequence(cfg), sort_keys=True))
    elif args.command == "evaluate":
        reports = pipeline.cmd_evaluate(cfg, args.split)
        for rep in reports.values():
            print(f"{rep.task}: macro_f1={rep.macro_f1:.4f} accuracy={rep.total_accuracy:.4f} "
                  f"composite={rep.composite:.4f}")
    elif args.command == "stats":
        splits = pipeline.parse_inputs(cfg)
        print(pipeline.stats_table(pipeline.train_stats(splits)))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except CheckpointError as exc:
        logger.error("checkpoint error: %s", exc)
        return EXIT_CHECKPOINT
    except DataError as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
