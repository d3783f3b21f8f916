"""Dataset manifests, frame loading and the synthetic thermal scene generator."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .tracking import BBox, Detection, write_detections

FRAME_SUFFIXES = (".pgm", ".png")
ROLES = ("adl", "fall")


# ---- manifest and loading ---------------------------------------------

@dataclass
class VideoEntry:
    id: str
    frames: str  # directory, relative to the manifest root
    role: str
    labels: Optional[str] = None  # labels CSV: video_id, frame_idx, is_fall
    split: Optional[str] = None  # "train" or "test"; default by role

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"video {self.id}: role must be one of {ROLES}, got {self.role!r}")
        if self.split is None:
            self.split = "train" if self.role == "adl" else "test"
        if self.split not in ("train", "test"):
            raise ValueError(f"video {self.id}: split must be train or test")


@dataclass
class DatasetManifest:
    root: Path
    videos: List[VideoEntry]

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        root = path.parent / doc.get("root", ".")
        videos = [VideoEntry(**v) for v in doc["videos"]]
        ids = [v.id for v in videos]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate video ids")
        return cls(root, videos)

    def save(self, path):
        path = Path(path)
        doc = {"root": ".", "videos": [asdict(v) for v in self.videos]}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


@dataclass
class Video:
    id: str
    role: str
    split: str
    frames: np.ndarray  # (n, h, w) uint8
    labels: np.ndarray  # (n,) 0/1


def read_frame(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "I;16", "I"):
                im = im.convert("L")
            a = np.asarray(im)
    except (OSError, ValueError) as e:
        raise ValueError(f"cannot read frame {path}: {e}") from None
    if a.ndim != 2:
        raise ValueError(f"frame {path} is not single-channel")
    if a.dtype != np.uint8:
        raise ValueError(f"frame {path} is not 8-bit")
    return a


def list_frames(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ValueError(f"frame directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def read_labels(path, video_id: str, n: int) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            if r["video_id"] != video_id:
                continue
            k = int(r["frame_idx"])
            if not 0 <= k < n:
                raise ValueError(f"{path}: frame_idx {k} outside video {video_id} of {n} frames")
            v = int(r["is_fall"])
            if v not in (0, 1):
                raise ValueError(f"{path}: is_fall must be 0 or 1")
            labels[k] = v
    return labels


def write_labels(path, video_id: str, labels: Sequence[int]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame_idx", "is_fall"])
        for k, v in enumerate(labels):
            w.writerow([video_id, k, int(v)])


def load_video(manifest: DatasetManifest, entry: VideoEntry) -> Video:
    paths = list_frames(manifest.root / entry.frames)
    if not paths:
        raise ValueError(f"video {entry.id}: no frames in {manifest.root / entry.frames}")
    frames = [read_frame(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"video {entry.id}: frames have differing sizes {sorted(shapes)}")
    n = len(frames)
    if entry.labels is None:
        if entry.role == "fall":
            raise ValueError(f"fall video {entry.id} has no labels file")
        labels = np.zeros(n, dtype=np.int64)
    else:
        labels = read_labels(manifest.root / entry.labels, entry.id, n)
        if entry.role == "adl" and labels.any():
            raise ValueError(f"ADL video {entry.id} has fall labels")
    return Video(entry.id, entry.role, entry.split, np.stack(frames), labels)


def load_dataset(manifest) -> List[Video]:
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    return [load_video(manifest, e) for e in manifest.videos]


# ---- synthetic scenes -------------------------------------------------

EVENT_KINDS = ("walk", "stand", "sit", "lie", "rise", "fall")


@dataclass
class SynthConfig:
    seed: int = 0
    frame_size: Tuple[int, int] = (64, 64)  # (h, w)
    n_train_adl: int = 8
    train_length: int = 250
    n_test_adl: int = 2
    test_adl_length: int = 160
    n_test_fall: int = 6
    test_fall_length: int = 120
    fall_frames: int = 10
    background: float = 40.0
    background_noise: float = 4.0
    warm_object: bool = True
    person_intensity: float = 190.0
    person_texture: float = 12.0
    upright: Tuple[float, float] = (5.0, 12.0)  # (half width, half height) at 64 px
    seated: Tuple[float, float] = (6.0, 8.0)
    lying: Tuple[float, float] = (12.0, 4.5)
    floor: float = 54.0
    walk_speed: Tuple[float, float] = (0.3, 0.9)
    det_jitter: float = 1.0
    det_margin: float = 2.0
    miss_rate: float = 0.05
    low_conf_rate: float = 0.05
    scripts: Optional[Dict[str, List[dict]]] = None  # explicit per-video event scripts

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        for k in ("upright", "seated", "lying", "walk_speed"):
            setattr(self, k, tuple(float(v) for v in getattr(self, k)))
        if min(self.frame_size) < 32:
            raise ValueError("frame_size must be at least 32 x 32")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @property
    def scale(self) -> float:
        return self.frame_size[0] / 64.0


@dataclass
class SynthVideo:
    id: str
    role: str
    split: str
    frames: np.ndarray
    labels: np.ndarray
    boxes: List[Optional[BBox]]  # ground-truth person boxes
    detections: Dict[int, List[Detection]]
    script: List[dict]


def _pose(cfg: SynthConfig, kind: str) -> Tuple[float, float]:
    return {"upright": cfg.upright, "seated": cfg.seated, "lying": cfg.lying}[kind]


def random_adl_script(rng: np.random.Generator, length: int) -> List[dict]:
    """Walk/stand segments interleaved with slow sit-down and lie-down episodes."""
    events: List[dict] = []
    t = 0
    while t < length:
        kind = rng.choice(["walk", "walk", "stand", "sit", "lie"])
        if kind in ("walk", "stand"):
            d = int(rng.integers(15, 50))
            events.append({"kind": kind, "start": t, "end": min(t + d, length)})
            t += d
            continue
        pose = "seated" if kind == "sit" else "lying"
        down, hold, up = int(rng.integers(25, 40)), int(rng.integers(10, 30)), int(rng.integers(25, 40))
        for k, d in (("sit" if kind == "sit" else "lie", down), ("stand", hold), ("rise", up)):
            if t >= length:
                break
            events.append({"kind": k, "start": t, "end": min(t + d, length), "pose": pose})
            t += d
    return events


def fall_script(rng: np.random.Generator, length: int, fall_frames: int) -> List[dict]:
    pre = int(rng.integers(length // 4, length // 2))
    events: List[dict] = []
    t = 0
    while t < pre:
        kind = "walk" if rng.random() < 0.7 else "stand"
        d = min(int(rng.integers(15, 35)), pre - t)
        events.append({"kind": kind, "start": t, "end": t + d})
        t += d
    events.append({"kind": "fall", "start": t, "end": t + fall_frames})
    events.append({"kind": "stand", "start": t + fall_frames, "end": length})
    return events


def _validate_script(script: List[dict], length: int):
    for e in script:
        if e["kind"] not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {e['kind']!r}")
        if not 0 <= e["start"] < e["end"] <= length:
            raise ValueError(f"event {e} outside video of {length} frames")


def _trajectory(cfg: SynthConfig, script: List[dict], length: int, rng: np.random.Generator):
    """Per-frame (cx, cy, ax, ay) at 64-px scale, plus per-frame fall labels."""
    _validate_script(script, length)
    w = 64.0 * cfg.frame_size[1] / cfg.frame_size[0]
    ax, ay = cfg.upright
    cx = float(rng.uniform(15, w - 15))
    direction = 1.0 if rng.random() < 0.5 else -1.0
    speed = float(rng.uniform(*cfg.walk_speed))
    states = np.zeros((length, 4))
    labels = np.zeros(length, dtype=np.int64)
    kinds = ["stand"] * length
    event_at = {}
    for e in script:
        for k in range(e["start"], e["end"]):
            kinds[k] = e["kind"]
            event_at[k] = e
    start_pose = (ax, ay)
    for k in range(length):
        e = event_at.get(k)
        kind = kinds[k]
        if e is not None and k == e["start"]:
            start_pose = (ax, ay)
            if kind == "walk":
                speed = float(rng.uniform(*cfg.walk_speed))
                if rng.random() < 0.3:
                    direction = -direction
        if kind == "walk":
            cx += direction * speed
            margin = ax + 2
            if cx < margin or cx > w - margin:
                direction = -direction
                cx = float(np.clip(cx, margin, w - margin))
        elif kind in ("sit", "lie", "rise", "fall"):
            target = {"sit": cfg.seated, "lie": cfg.lying, "rise": cfg.upright,
                      "fall": cfg.lying}[kind]
            n = e["end"] - e["start"]
            u = (k - e["start"] + 1) / n
            if kind == "fall":
                u = u * u  # accelerating drop
            else:
                u = 0.5 - 0.5 * np.cos(np.pi * u)  # slow start and finish
            ax = start_pose[0] + (target[0] - start_pose[0]) * u
            ay = start_pose[1] + (target[1] - start_pose[1]) * u
            if kind == "fall":
                labels[k] = 1
                cx += direction * 0.6
        cx = float(np.clip(cx, ax + 1, w - ax - 1))
        states[k] = (cx, cfg.floor - ay, ax, ay)
    return states, labels


def _render(cfg: SynthConfig, states: np.ndarray, rng: np.random.Generator):
    h, w = cfg.frame_size
    s = cfg.scale
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.full((h, w), cfg.background)
    base += 6.0 * (yy / h)  # mild vertical gradient
    if cfg.warm_object:
        oy, ox = int(6 * s), int(w - 14 * s)
        base[oy : oy + int(6 * s), ox : ox + int(8 * s)] += 45.0
    # static texture of the body surface, indexed in body-normalised coordinates
    tex = rng.normal(0, 1, (9, 9))
    frames = np.empty((len(states), h, w), dtype=np.uint8)
    boxes: List[Optional[BBox]] = []
    for k, (cx, cy, ax, ay) in enumerate(states):
        cx, cy, ax, ay = cx * s, cy * s, ax * s, ay * s
        u = (xx - cx) / ax
        v = (yy - cy) / ay
        r = np.sqrt(u**2 + v**2)
        alpha = np.clip((1.0 - r) * min(ax, ay) + 0.5, 0.0, 1.0)
        iu = np.clip(((u + 1) * 4).astype(int), 0, 8)
        iv = np.clip(((v + 1) * 4).astype(int), 0, 8)
        person = cfg.person_intensity * (1.0 - 0.2 * r**2) + cfg.person_texture * tex[iv, iu]
        img = base * (1 - alpha) + person * alpha
        img += rng.normal(0, cfg.background_noise, (h, w))
        frames[k] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        boxes.append(BBox.from_corners((cx - ax, cy - ay, cx + ax + 1, cy + ay + 1), (h, w)))
    return frames, boxes


def _oracle_detections(cfg: SynthConfig, boxes, rng: np.random.Generator):
    h, w = cfg.frame_size
    dets: Dict[int, List[Detection]] = {}
    for k, b in enumerate(boxes):
        r = rng.random(4)
        jit = rng.normal(0, cfg.det_jitter * cfg.scale, 4)
        margin = rng.uniform(0, cfg.det_margin * cfg.scale, 4)
        if b is None or r[0] < cfg.miss_rate:
            continue
        corners = (b.x1 - margin[0] + jit[0], b.y1 - margin[1] + jit[1],
                   b.x2 + margin[2] + jit[2], b.y2 + margin[3] + jit[3])
        box = BBox.from_corners(corners, (h, w))
        if box is None:
            continue
        if r[1] < cfg.low_conf_rate:
            conf = float(0.05 + 0.24 * r[2])  # below the acceptance threshold
        else:
            conf = float(0.5 + 0.5 * r[2])
        dets[k] = [Detection(box, round(conf, 6), "oracle")]
    return dets


def synth_video(cfg: SynthConfig, video_id: str, role: str, split: str, length: int,
                rng: np.random.Generator, script: Optional[List[dict]] = None) -> SynthVideo:
    if script is None:
        script = (fall_script(rng, length, cfg.fall_frames) if role == "fall"
                  else random_adl_script(rng, length))
    states, labels = _trajectory(cfg, script, length, rng)
    frames, boxes = _render(cfg, states, rng)
    dets = _oracle_detections(cfg, boxes, rng)
    return SynthVideo(video_id, role, split, frames, labels, boxes, dets, script)


def synth_generate(cfg: SynthConfig) -> List[SynthVideo]:
    """All synthetic videos: ADL training videos, ADL and fall test videos."""
    plan = (
        [(f"adl_train_{i:02d}", "adl", "train", cfg.train_length) for i in range(cfg.n_train_adl)]
        + [(f"adl_test_{i:02d}", "adl", "test", cfg.test_adl_length) for i in range(cfg.n_test_adl)]
        + [(f"fall_{i:02d}", "fall", "test", cfg.test_fall_length) for i in range(cfg.n_test_fall)]
    )
    videos = []
    for k, (vid, role, split, length) in enumerate(plan):
        rng = np.random.default_rng([cfg.seed, 7, k])
        script = (cfg.scripts or {}).get(vid)
        videos.append(synth_video(cfg, vid, role, split, length, rng, script))
    return videos


def write_pgm(path, frame: np.ndarray):
    Image.fromarray(frame, mode="L").save(path, format="PPM")


def write_synth_dataset(directory, videos: Sequence[SynthVideo]) -> Path:
    """Frames as PGM, labels CSVs, the oracle detections CSV and a manifest."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in videos:
        fdir = root / "frames" / v.id
        fdir.mkdir(parents=True, exist_ok=True)
        for k, f in enumerate(v.frames):
            write_pgm(fdir / f"{k:05d}.pgm", f)
        labels = None
        if v.role == "fall":
            labels = f"labels/{v.id}.csv"
            (root / "labels").mkdir(exist_ok=True)
            write_labels(root / labels, v.id, v.labels)
        entries.append(VideoEntry(v.id, f"frames/{v.id}", v.role, labels, v.split))
    write_detections(root / "detections.csv", {v.id: v.detections for v in videos})
    manifest = DatasetManifest(root, entries)
    manifest.save(root / "manifest.json")
    return root / "manifest.json"
