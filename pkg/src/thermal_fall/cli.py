"""Command-line front end: ``thermal-fall <stage> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .training import VARIANTS

DEFAULT_VARIANT = "Fusion-Diff-ROI-3DCAE"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config with one section per module")
    common.add_argument("--seed", type=int, help="overrides the synth and train seeds")
    common.add_argument("--out", type=Path, help="output directory of this stage")
    common.add_argument("--cache", type=Path, default=Path("cache"), help="cache root")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="thermal-fall", description=__doc__)
    sub = p.add_subparsers(dest="stage", required=True, metavar="stage")
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic thermal dataset")
    s.add_argument("--native-size", type=int, nargs=2, metavar=("H", "W"),
                   help="render frames at H x W instead of 64 x 64")
    t = sub.add_parser("track", parents=[common], help="localise the person in every frame")
    t.add_argument("--manifest", type=Path, help="dataset manifest (default: synth output)")
    t.add_argument("--detections", type=Path, help="detections CSV (default: next to manifest)")
    sub.add_parser("flow", parents=[common], help="dense optical flow of tracked frame pairs")
    sub.add_parser("windows", parents=[common], help="model-ready sub-video arrays")
    for name in ("train", "score"):
        q = sub.add_parser(name, parents=[common], help=f"{name} one model variant")
        q.add_argument("--variant", default=DEFAULT_VARIANT, choices=sorted(VARIANTS))
    e = sub.add_parser("eval", parents=[common], help="ROC/PR tables and tolerance sweep")
    e.add_argument("--svg", action="store_true", help="also write SVG curves")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pipeline.PipelineConfig.load(args.config) if args.config else \
            pipeline.PipelineConfig()
        cfg.with_seed(args.seed)
        cache = args.cache
        stage = args.stage
        if stage in ("train", "score"):
            out = args.out or cache / stage / args.variant
        else:
            out = args.out or cache / stage
        if stage == "synth":
            if args.native_size:
                cfg.synth.frame_size = tuple(args.native_size)
            path = pipeline.run_synth(cfg, out)
        elif stage == "track":
            path = pipeline.run_track(cfg, cache, out, args.manifest, args.detections)
        elif stage == "flow":
            path = pipeline.run_flow(cfg, cache, out)
        elif stage == "windows":
            path = pipeline.run_windows(cfg, cache, out)
        elif stage == "train":
            path = pipeline.run_train(cfg, cache, out, args.variant)
        elif stage == "score":
            path = pipeline.run_score(cfg, cache, out, args.variant)
        else:
            path = pipeline.run_eval(cfg, cache, out, args.svg or None)
    except (pipeline.MissingStage, ValueError, FileNotFoundError, OSError) as e:
        print(f"thermal-fall {args.stage}: error: {e}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
