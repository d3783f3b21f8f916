"""Run the whole pipeline on the seeded synthetic desk dataset and report
frame-level AUCs of the trained model against its untrained control.

    python scripts/run_desk_experiment.py --cache /tmp/desk [--variant ...]
"""
import argparse
import json
import time
from pathlib import Path

from thermal_fall import pipeline
from thermal_fall.evaluation import read_table

ROOT = Path(__file__).resolve().parents[1]


def run(cache: Path, config: Path, variant: str, stages=pipeline.STAGES):
    cfg = pipeline.PipelineConfig.load(config)
    timings = {}
    for stage in stages:
        t0 = time.perf_counter()
        if stage == "synth":
            pipeline.run_synth(cfg, cache / "synth")
        elif stage == "track":
            pipeline.run_track(cfg, cache, cache / "track")
        elif stage == "flow":
            pipeline.run_flow(cfg, cache, cache / "flow")
        elif stage == "windows":
            pipeline.run_windows(cfg, cache, cache / "windows")
        elif stage == "train":
            pipeline.run_train(cfg, cache, cache / "train" / variant, variant)
        elif stage == "score":
            pipeline.run_score(cfg, cache, cache / "score" / variant, variant)
        elif stage == "eval":
            pipeline.run_eval(cfg, cache, cache / "eval")
        timings[stage] = time.perf_counter() - t0
        print(f"{stage:8s} {timings[stage]:8.1f} s", flush=True)
    return timings


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", type=Path, default=Path("cache_desk"))
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.json")
    ap.add_argument("--variant", default="Fusion-Diff-ROI-3DCAE")
    ap.add_argument("--stages", nargs="*", default=list(pipeline.STAGES))
    args = ap.parse_args()
    timings = run(args.cache, args.config, args.variant, args.stages)
    print(f"total    {sum(timings.values()):8.1f} s")
    for r in read_table(args.cache / "eval" / "results.csv"):
        if r["level"] == "frame":
            print(f"{r['method']:40s} {r['variant']:18s} ROC mu {r['roc_c_mu']:.3f} "
                  f"sigma {r['roc_c_sigma']:.3f}  PR mu {r['pr_c_mu']:.3f} "
                  f"sigma {r['pr_c_sigma']:.3f}")
    (args.cache / "timings.json").write_text(json.dumps(timings, indent=2))


if __name__ == "__main__":
    main()
