"""Sub-video splitting, frame preprocessing and sliding-window datasets."""
from __future__ import annotations

import io
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .tracking import BBox

log = logging.getLogger(__name__)

T_WINDOW = 8
SIZE = 64
MAX_GAP = 10
WINDOW_FORMAT = "TFWIN1"


@dataclass
class SubVideo:
    video_id: str
    frames: List[int]  # 0-based indices into the source video
    boxes: List[BBox]

    def __len__(self):
        return len(self.frames)


def split_subvideos(video_id: str, boxes: Sequence[Optional[BBox]], gap: int = MAX_GAP,
                    min_len: int = T_WINDOW) -> List[SubVideo]:
    """Maximal runs of localised frames, broken at ``gap`` or more untracked frames.

    Untracked frames inside a shorter gap are dropped without splitting. Runs
    shorter than ``min_len`` are discarded.
    """
    runs: List[SubVideo] = []
    cur = SubVideo(video_id, [], [])
    missing = 0
    for idx, box in enumerate(boxes):
        if box is None:
            missing += 1
            if missing == gap and cur.frames:
                runs.append(cur)
                cur = SubVideo(video_id, [], [])
            continue
        missing = 0
        cur.frames.append(idx)
        cur.boxes.append(box)
    if cur.frames:
        runs.append(cur)
    return [r for r in runs if len(r) >= min_len]


def box_mask(box: BBox, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[box.y1 : box.y2, box.x1 : box.x2] = True
    return m


def minmax_to_unit(values: np.ndarray) -> np.ndarray:
    """Affine map of ``values`` onto [-1, 1]; a constant input maps to -1."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.full(values.shape, -1.0, dtype=np.float32)
    return ((values - lo) * (2.0 / (hi - lo)) - 1.0).astype(np.float32)


def resize_bilinear(img: np.ndarray, size=(SIZE, SIZE)) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment."""
    h, w = img.shape
    if (h, w) == tuple(size):
        return img.astype(np.float32, copy=True)
    ys = (np.arange(size[0]) + 0.5) * h / size[0] - 0.5
    xs = (np.arange(size[1]) + 0.5) * w / size[1] - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), [yy, xx], order=1,
                                   mode="nearest").astype(np.float32)


def resize_nearest(mask: np.ndarray, size=(SIZE, SIZE)) -> np.ndarray:
    h, w = mask.shape
    if (h, w) == tuple(size):
        return mask.astype(bool, copy=True)
    ys = np.minimum((np.arange(size[0]) + 0.5) * h / size[0], h - 1).astype(int)
    xs = np.minimum((np.arange(size[1]) + 0.5) * w / size[1], w - 1).astype(int)
    return mask[np.ix_(ys, xs)].astype(bool)


def preprocess_frame(frame: np.ndarray, box: Optional[BBox], roi: bool = True, size: int = SIZE):
    """Normalise a raw frame to [-1, 1] and resize to ``size`` x ``size``.

    With ``roi`` the min-max range comes from the pixels inside ``box`` and
    everything outside is -1. Returns ``(frame, mask)`` where ``mask`` is the
    resized box mask (all True when ``roi`` is off).
    """
    frame = np.asarray(frame, dtype=np.float32)
    if not roi:
        out = resize_bilinear(minmax_to_unit(frame), (size, size))
        return out, np.ones((size, size), dtype=bool)
    mask = box_mask(box, frame.shape)
    inside = frame[mask]
    out = np.full(frame.shape, -1.0, dtype=np.float32)
    if inside.max() <= inside.min():
        log.warning("constant-intensity ROI %s; frame set to -1", box)
    else:
        out[mask] = minmax_to_unit(inside)
    small_mask = resize_nearest(mask, (size, size))
    if not small_mask.any():
        # keep at least the pixel nearest the box centre
        cy = min(int((box.y1 + box.y2) / 2 * size / frame.shape[0]), size - 1)
        cx = min(int((box.x1 + box.x2) / 2 * size / frame.shape[1]), size - 1)
        small_mask[cy, cx] = True
    small = resize_bilinear(out, (size, size))
    small[~small_mask] = -1.0
    return small, small_mask


@dataclass
class SubVideoArrays:
    """Model-ready per-frame arrays of one sub-video.

    Flow arrays have one entry fewer than thermal arrays: flow frame ``k`` is
    computed from thermal frames ``k`` and ``k + 1``, and its mask is the union
    of their masks.
    """

    video_id: str
    frame_idx: np.ndarray
    thermal_full: np.ndarray
    thermal_roi: np.ndarray
    mask: np.ndarray
    flow_full: np.ndarray
    flow_roi: np.ndarray
    flow_mask: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.frame_idx)

    @property
    def n_windows(self):
        return max(0, len(self) - T_WINDOW + 1)

    def save(self, path):
        arrays = {"format": np.array(WINDOW_FORMAT), "video_id": np.array(self.video_id)}
        arrays.update({k: getattr(self, k) for k in _ARRAY_FIELDS})
        save_npz_deterministic(path, arrays)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            if "format" not in z or str(z["format"]) != WINDOW_FORMAT:
                raise ValueError(f"{path}: not a {WINDOW_FORMAT} window cache")
            return cls(video_id=str(z["video_id"]), **{k: z[k] for k in _ARRAY_FIELDS})


def save_npz_deterministic(path, arrays: Dict[str, np.ndarray]):
    """``np.savez`` equivalent with fixed zip timestamps (byte-reproducible)."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


_ARRAY_FIELDS = ("frame_idx", "thermal_full", "thermal_roi", "mask", "flow_full", "flow_roi",
                 "flow_mask", "labels")


def make_windows(n_frames: int, t: int = T_WINDOW) -> List[range]:
    """Thermal frame ranges of the stride-1 windows of a sub-video."""
    return [range(i, i + t) for i in range(max(0, n_frames - t + 1))]


class WindowSet:
    """Stride-1 windows over a list of sub-videos; windows never cross sub-videos."""

    def __init__(self, subvideos: Sequence[SubVideoArrays], t: int = T_WINDOW):
        self.subvideos = list(subvideos)
        self.t = t
        self.index = [(s, w.start) for s, sv in enumerate(self.subvideos)
                      for w in make_windows(len(sv), t)]

    def __len__(self):
        return len(self.index)

    def batch(self, indices: Sequence[int], roi: bool = True) -> Dict[str, np.ndarray]:
        t = self.t
        th, tm, fl, fm = [], [], [], []
        for k in indices:
            s, i = self.index[k]
            sv = self.subvideos[s]
            th.append((sv.thermal_roi if roi else sv.thermal_full)[i : i + t])
            fl.append((sv.flow_roi if roi else sv.flow_full)[i : i + t - 1])
            if roi:
                tm.append(sv.mask[i : i + t])
                fm.append(sv.flow_mask[i : i + t - 1])
            else:
                tm.append(np.ones(sv.mask[i : i + t].shape, dtype=bool))
                fm.append(np.ones(sv.flow_mask[i : i + t - 1].shape, dtype=bool))
        return {
            "thermal": np.stack(th)[..., None].astype(np.float32),
            "thermal_mask": np.stack(tm),
            "flow": np.stack(fl)[..., None].astype(np.float32),
            "flow_mask": np.stack(fm),
        }


def label_windows(frame_labels: np.ndarray, alpha: int, t: int = T_WINDOW) -> np.ndarray:
    """Window is a fall iff it holds at least ``alpha`` fall frames."""
    if not 1 <= alpha <= t:
        raise ValueError(f"alpha must lie in [1, {t}], got {alpha}")
    return (window_fall_counts(frame_labels, t) >= alpha).astype(np.int64)


def window_fall_counts(frame_labels: np.ndarray, t: int = T_WINDOW) -> np.ndarray:
    labels = np.asarray(frame_labels, dtype=np.int64)
    n = max(0, len(labels) - t + 1)
    c = np.concatenate([[0], np.cumsum(labels)])
    return c[t : t + n] - c[:n]


def save_window_cache(directory, subvideos: Sequence[SubVideoArrays]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, sv in enumerate(subvideos):
        p = directory / f"{sv.video_id}__{k:03d}.npz"
        sv.save(p)
        paths.append(p)
    return paths


def load_window_cache(directory) -> List[SubVideoArrays]:
    paths = sorted(Path(directory).glob("*.npz"))
    return [SubVideoArrays.load(p) for p in paths]
