"""Pipeline stages with explicit file caches.

Each stage reads its predecessor's directory under the cache root and writes
its own, so any stage can be re-run alone. The layout is::

    cache/synth/      manifest.json, frames/, labels/, detections.csv
    cache/track/      tracks.csv, meta.json
    cache/flow/       <video>/<sub>_<pair>.flow
    cache/windows/    train/*.npz, test/*.npz
    cache/train/<variant>/   checkpoint.tfad, loss_log.csv
    cache/score/<variant>/   frame_scores.csv, window_scores.csv (+ untrained/)
    cache/eval/       results.csv, tolerance_sweep.csv, curves.svg
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .data import DatasetManifest, SynthConfig, load_dataset, synth_generate, write_synth_dataset
from .evaluation import (
    RESULT_COLUMNS,
    SWEEP_COLUMNS,
    frame_results,
    plot_curves,
    tolerance_sweep,
    window_results,
    write_table,
)
from .flow import FlowParams, farneback_flow, make_flow_image, read_flow, write_flow
from .models import load_models
from .scoring import read_scores, score_subvideos, write_scores
from .tracking import TrackParams, read_detections, read_tracks, run_tracker, write_tracks
from .training import LossConfig, TrainConfig, build_variant_models, train
from .windows import (
    SIZE,
    SubVideoArrays,
    WindowSet,
    box_mask,
    load_window_cache,
    preprocess_frame,
    resize_bilinear,
    resize_nearest,
    save_window_cache,
    split_subvideos,
)

log = logging.getLogger(__name__)

STAGES = ("synth", "track", "flow", "windows", "train", "score", "eval")


class MissingStage(RuntimeError):
    def __init__(self, stage: str, path: Path):
        super().__init__(f"missing output of stage '{stage}' (expected {path}); run "
                         f"`thermal-fall {stage}` first")
        self.stage = stage


@dataclass
class PipelineConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    tracking: TrackParams = field(default_factory=TrackParams)
    flow: FlowParams = field(default_factory=FlowParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: Dict[str, dict] = field(default_factory=dict)  # per-variant weight overrides
    score: Dict[str, object] = field(default_factory=lambda: {"batch_size": 16})
    eval: Dict[str, object] = field(default_factory=lambda: {"svg": False})

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {"synth", "tracking", "flow", "train", "loss", "score", "eval"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        return cls(
            synth=SynthConfig.from_dict(d.get("synth", {})),
            tracking=TrackParams.from_dict(d.get("tracking", {})),
            flow=FlowParams(**d.get("flow", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            loss=dict(d.get("loss", {})),
            score={"batch_size": 16, **d.get("score", {})},
            eval={"svg": False, **d.get("eval", {})},
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def loss_config(self, variant: str) -> LossConfig:
        return LossConfig(variant=variant, **self.loss.get(variant, {}))

    def with_seed(self, seed: Optional[int]) -> "PipelineConfig":
        if seed is not None:
            self.synth.seed = seed
            self.train.seed = seed
        return self


def _require(stage: str, path: Path) -> Path:
    if not path.exists():
        raise MissingStage(stage, path)
    return path


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# ---- stages -----------------------------------------------------------

def run_synth(cfg: PipelineConfig, out: Path) -> Path:
    videos = synth_generate(cfg.synth)
    return write_synth_dataset(out, videos)


def run_track(cfg: PipelineConfig, cache: Path, out: Path, manifest: Optional[Path] = None,
              detections: Optional[Path] = None) -> Path:
    manifest = Path(manifest) if manifest else _require("synth", cache / "synth" / "manifest.json")
    detections = Path(detections) if detections else manifest.parent / "detections.csv"
    if not detections.exists():
        raise FileNotFoundError(f"detections file {detections} not found")
    dets = read_detections(detections)
    tracks = {}
    for video in load_dataset(manifest):
        tracks[video.id] = run_tracker(video.frames, dets.get(video.id, {}), cfg.tracking)
    out.mkdir(parents=True, exist_ok=True)
    write_tracks(out / "tracks.csv", tracks)
    _write_json(out / "meta.json", {"manifest": str(manifest.resolve())})
    return out / "tracks.csv"


def _track_inputs(cache: Path):
    meta = json.loads(_require("track", cache / "track" / "meta.json").read_text())
    tracks = read_tracks(_require("track", cache / "track" / "tracks.csv"))
    return Path(meta["manifest"]), tracks


def _subvideos(video, boxes):
    boxes = list(boxes) + [None] * (len(video.frames) - len(boxes))
    return split_subvideos(video.id, boxes)


def run_flow(cfg: PipelineConfig, cache: Path, out: Path) -> Path:
    manifest, tracks = _track_inputs(cache)
    out.mkdir(parents=True, exist_ok=True)
    for video in load_dataset(manifest):
        vdir = out / video.id
        vdir.mkdir(exist_ok=True)
        for s, sv in enumerate(_subvideos(video, tracks.get(video.id, []))):
            for j in range(len(sv.frames) - 1):
                a = video.frames[sv.frames[j]].astype(np.float64)
                b = video.frames[sv.frames[j + 1]].astype(np.float64)
                fx, fy = farneback_flow(a, b, cfg.flow)
                write_flow(vdir / f"{s:03d}_{j:05d}.flow", fx, fy)
    _write_json(out / "meta.json", {"flow": asdict(cfg.flow)})
    return out


def build_subvideo_arrays(video, sv, s: int, flow_dir: Path) -> SubVideoArrays:
    th_full, th_roi, masks = [], [], []
    for k, box in zip(sv.frames, sv.boxes):
        frame = video.frames[k]
        roi, m = preprocess_frame(frame, box, roi=True)
        full, _ = preprocess_frame(frame, None, roi=False)
        th_roi.append(roi)
        th_full.append(full)
        masks.append(m)
    fl_full, fl_roi, fl_mask = [], [], []
    shape = video.frames.shape[1:]
    for j in range(len(sv.frames) - 1):
        path = flow_dir / video.id / f"{s:03d}_{j:05d}.flow"
        if not path.exists():
            raise MissingStage("flow", path)
        fx, fy, _ = read_flow(path)
        union = box_mask(sv.boxes[j], shape) | box_mask(sv.boxes[j + 1], shape)
        mag_full = make_flow_image(fx, fy)[..., 2]
        mag_roi = make_flow_image(fx, fy, union)[..., 2]
        small_mask = resize_nearest(union, (SIZE, SIZE))
        small = resize_bilinear(mag_roi, (SIZE, SIZE))
        small[~small_mask] = -1.0
        fl_full.append(resize_bilinear(mag_full, (SIZE, SIZE)))
        fl_roi.append(small)
        fl_mask.append(small_mask)
    return SubVideoArrays(
        video_id=video.id,
        frame_idx=np.asarray(sv.frames, dtype=np.int64),
        thermal_full=np.stack(th_full).astype(np.float32),
        thermal_roi=np.stack(th_roi).astype(np.float32),
        mask=np.stack(masks),
        flow_full=np.stack(fl_full).astype(np.float32),
        flow_roi=np.stack(fl_roi).astype(np.float32),
        flow_mask=np.stack(fl_mask),
        labels=video.labels[np.asarray(sv.frames)].astype(np.int64),
    )


def run_windows(cfg: PipelineConfig, cache: Path, out: Path) -> Path:
    manifest, tracks = _track_inputs(cache)
    flow_dir = _require("flow", cache / "flow" / "meta.json").parent
    split: Dict[str, List[SubVideoArrays]] = {"train": [], "test": []}
    for video in load_dataset(manifest):
        for s, sv in enumerate(_subvideos(video, tracks.get(video.id, []))):
            split[video.split].append(build_subvideo_arrays(video, sv, s, flow_dir))
    for name, svs in split.items():
        save_window_cache(out / name, svs)
    counts = {k: sum(x.n_windows for x in v) for k, v in split.items()}
    _write_json(out / "meta.json", {"windows": counts,
                                    "subvideos": {k: len(v) for k, v in split.items()}})
    log.info("windows: %s", counts)
    return out


def _windows(cache: Path, split: str) -> List[SubVideoArrays]:
    _require("windows", cache / "windows" / "meta.json")
    return load_window_cache(cache / "windows" / split)


def run_train(cfg: PipelineConfig, cache: Path, out: Path, variant: str) -> Path:
    data = WindowSet(_windows(cache, "train"))
    train(variant, data, cfg.train, cfg.loss_config(variant), out_dir=out)
    return out / "checkpoint.tfad"


def run_score(cfg: PipelineConfig, cache: Path, out: Path, variant: str) -> Path:
    ckpt = _require("train", cache / "train" / variant / "checkpoint.tfad")
    test = _windows(cache, "test")
    bs = int(cfg.score.get("batch_size", 16))
    models = build_variant_models(variant, cfg.train.seed)
    load_models(ckpt, models.all)
    write_scores(out, score_subvideos(models, test, bs))
    # control: identically initialised, never trained
    control = build_variant_models(variant, cfg.train.seed,
                                   generator_init=cfg.train.generator_init)
    write_scores(out / "untrained", score_subvideos(control, test, bs))
    return out


def run_eval(cfg: PipelineConfig, cache: Path, out: Path, svg: Optional[bool] = None) -> Path:
    score_root = cache / "score"
    dirs = sorted(p.parent for p in score_root.glob("*/frame_scores.csv"))
    if not dirs:
        raise MissingStage("score", score_root / "<variant>" / "frame_scores.csv")
    results, sweep = [], []
    curves = {}
    for d in dirs:
        for method, sd in ((d.name, d), (f"{d.name} (untrained)", d / "untrained")):
            if not (sd / "frame_scores.csv").exists():
                continue
            frames = read_scores(sd / "frame_scores.csv")
            windows = read_scores(sd / "window_scores.csv")
            results += frame_results(method, frames)
            sw = tolerance_sweep(method, windows)
            sweep += sw
            curves[method] = (frames, sw)
    results += window_results(sweep)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "results.csv", RESULT_COLUMNS, results)
    write_table(out / "tolerance_sweep.csv", SWEEP_COLUMNS, sweep)
    if svg if svg is not None else cfg.eval.get("svg", False):
        for i, (method, (frames, sw)) in enumerate(sorted(curves.items())):
            plot_curves(out / f"curves_{i:02d}.svg", frames, sw, title=method)
    return out / "results.csv"
