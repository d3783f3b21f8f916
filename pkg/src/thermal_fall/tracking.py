"""Person localisation: Otsu/contour boxes, a constant-velocity Kalman box
tracker and the detect/contour/track fusion loop."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

MIN_CONFIDENCE = 0.3
MAX_AGE = 20
SOURCES = ("detect", "contour", "track", "none")


@dataclass(frozen=True, order=True)
class BBox:
    """Integer box; ``(x1, y1)`` inclusive, ``(x2, y2)`` exclusive."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {tuple(self)}")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2

    def intersection(self, other: "BBox") -> int:
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        return max(w, 0) * max(h, 0)

    def iou(self, other: "BBox") -> float:
        inter = self.intersection(other)
        return inter / (self.area + other.area - inter)

    def within(self, shape) -> bool:
        h, w = shape[:2]
        return 0 <= self.x1 and 0 <= self.y1 and self.x2 <= w and self.y2 <= h

    @classmethod
    def from_corners(cls, corners, shape) -> Optional["BBox"]:
        """Round float corners and clip to ``shape``; None if nothing is left."""
        h, w = shape[:2]
        x1, y1, x2, y2 = (int(round(float(v))) for v in corners)
        x1, x2 = min(max(x1, 0), w), min(max(x2, 0), w)
        y1, y2 = min(max(y1, 0), h), min(max(y2, 0), h)
        if x1 >= x2 or y1 >= y2:
            return None
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class Detection:
    box: BBox
    confidence: float
    source: str = "detector"


# ---- image processing --------------------------------------------------

def otsu_threshold(frame: np.ndarray) -> int:
    """Threshold ``t`` maximising between-class variance of ``{< t}`` / ``{>= t}``.

    Ties go to the lowest ``t``. A constant frame returns its value.
    """
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("empty frame")
    hist = np.bincount(frame.astype(np.uint8).ravel(), minlength=256)
    nz = np.flatnonzero(hist)
    if len(nz) == 1:
        return int(nz[0])
    # exact integer arithmetic so ties are real ties:
    # between-class variance * n^2 = (n*s0 - w0*S)^2 / (w0 * w1)
    counts = [int(c) for c in hist]
    n = sum(counts)
    S = sum(i * c for i, c in enumerate(counts))
    best_num, best_den, best_t = -1, 1, None
    w0 = s0 = 0
    for t in range(1, 256):
        w0 += counts[t - 1]
        s0 += (t - 1) * counts[t - 1]
        w1 = n - w0
        if w0 == 0 or w1 == 0:
            continue
        num = (n * s0 - w0 * S) ** 2
        den = w0 * w1
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t


def foreground_mask(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.min() == frame.max():
        return np.zeros(frame.shape, dtype=bool)
    return frame >= otsu_threshold(frame)


_SQUARE = np.ones((3, 3), dtype=bool)


def morph_clean(mask: np.ndarray) -> np.ndarray:
    """One 3x3 opening followed by one 3x3 closing."""
    m = np.asarray(mask, dtype=bool)
    m = ndimage.binary_dilation(ndimage.binary_erosion(m, _SQUARE, border_value=1), _SQUARE)
    m = ndimage.binary_erosion(ndimage.binary_dilation(m, _SQUARE), _SQUARE, border_value=1)
    return m


def biggest_contour_box(mask: np.ndarray) -> Optional[BBox]:
    """Bounding box of the largest 8-connected component, or None."""
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=np.ones((3, 3)))
    if n == 0:
        return None
    areas = np.bincount(labels.ravel())[1:]
    k = int(np.argmax(areas)) + 1
    ys, xs = np.nonzero(labels == k)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def contour_box(frame: np.ndarray) -> Optional[BBox]:
    return biggest_contour_box(morph_clean(foreground_mask(frame)))


# ---- matching ----------------------------------------------------------

@dataclass(frozen=True)
class MatchParams:
    iou: float = 0.3
    subset: float = 0.9
    weak_iou: float = 0.1
    area_ratio: float = 0.25


def box_match(a: BBox, b: BBox, p: MatchParams = MatchParams()) -> bool:
    inter = a.intersection(b)
    if inter == 0:
        return False
    iou = inter / (a.area + b.area - inter)
    if iou >= p.iou:
        return True
    if inter / min(a.area, b.area) >= p.subset:
        return True
    return iou >= p.weak_iou and min(a.area, b.area) / max(a.area, b.area) >= p.area_ratio


def box_selection(detect: BBox, candidate: BBox) -> BBox:
    """The detector box is loose, so the matched candidate is kept."""
    return candidate


# ---- Kalman box tracker ------------------------------------------------

@dataclass(frozen=True)
class KalmanParams:
    process_noise: float = 1e-2  # velocity components
    measurement_noise: float = 1.0
    initial_cov: float = 10.0


_F = np.block([[np.eye(4), np.eye(4)], [np.zeros((4, 4)), np.eye(4)]])
_H = np.hstack([np.eye(4), np.zeros((4, 4))])
EIG_FLOOR = 1e-9


def _psd(P: np.ndarray) -> np.ndarray:
    P = (P + P.T) / 2
    vals, vecs = np.linalg.eigh(P)
    if vals.min() >= EIG_FLOOR:
        return P
    vals = np.maximum(vals, EIG_FLOOR)
    P = (vecs * vals) @ vecs.T
    return (P + P.T) / 2


@dataclass
class KalmanState:
    x: np.ndarray  # (x1, y1, x2, y2, vx1, vy1, vx2, vy2)
    P: np.ndarray

    @classmethod
    def initial(cls, box: BBox, params: KalmanParams = KalmanParams()):
        x = np.zeros(8)
        x[:4] = tuple(box)
        return cls(x, np.eye(8) * params.initial_cov)


def kalman_predict(s: KalmanState, params: KalmanParams = KalmanParams()) -> KalmanState:
    Q = np.diag([0.0] * 4 + [params.process_noise] * 4)
    return KalmanState(_F @ s.x, _psd(_F @ s.P @ _F.T + Q))


def kalman_update(s: KalmanState, measured: BBox,
                  params: KalmanParams = KalmanParams()) -> KalmanState:
    z = np.asarray(tuple(measured), dtype=np.float64)
    S = _H @ s.P @ _H.T + np.eye(4) * params.measurement_noise
    K = np.linalg.solve(S, _H @ s.P).T
    x = s.x + K @ (z - _H @ s.x)
    IKH = np.eye(8) - K @ _H
    # Joseph form keeps the covariance symmetric
    P = IKH @ s.P @ IKH.T + K @ (np.eye(4) * params.measurement_noise) @ K.T
    return KalmanState(x, _psd(P))


@dataclass
class Tracker:
    state: KalmanState
    current: BBox
    shape: Tuple[int, int]
    params: KalmanParams = KalmanParams()
    losses: float = 0.0
    predicted: bool = False  # Predict() already ran for this frame

    @classmethod
    def initialize(cls, box: BBox, shape, params: KalmanParams = KalmanParams()):
        return cls(KalmanState.initial(box, params), box, tuple(shape[:2]), params)

    def get_current_box(self) -> BBox:
        return self.current

    def _box(self, x) -> BBox:
        return BBox.from_corners(x[:4], self.shape) or self.current

    def predict(self) -> BBox:
        self.state = kalman_predict(self.state, self.params)
        self.predicted = True
        return self._box(self.state.x)

    def kalman_filter(self, measured: BBox) -> BBox:
        if not self.predicted:
            self.state = kalman_predict(self.state, self.params)
        self.state = kalman_update(self.state, measured, self.params)
        self.predicted = False
        self.current = self._box(self.state.x)
        return self.current


@dataclass(frozen=True)
class StepResult:
    box: Optional[BBox]
    source: str


def track_step(tracker: Optional[Tracker], frame: np.ndarray, detection: Optional[BBox],
               match: MatchParams = MatchParams(), kalman: KalmanParams = KalmanParams(),
               max_age: float = MAX_AGE) -> Tuple[Optional[Tracker], StepResult]:
    """One frame of the detect/contour/track fusion loop.

    ``detection`` must already be confidence-filtered. Returns the possibly new
    tracker and the frame's final box with the source that produced it.
    """
    final, source = None, "none"
    if tracker is not None:
        tracker.predicted = False
    if detection is not None:
        det = detection
        source = "detect"
        cbox = contour_box(frame)
        if tracker is not None:
            tbox = tracker.get_current_box()
            if box_match(tbox, det, match):
                det, source = box_selection(det, tbox), "track"
            else:
                tracker = None
        if cbox is not None and box_match(cbox, det, match):
            det, source = box_selection(det, cbox), "contour"
        final = det
        if tracker is not None:
            tracker.kalman_filter(det)
            tracker.losses = 0.0
        else:
            tracker = Tracker.initialize(det, frame.shape, kalman)
    elif tracker is not None:
        tbox = tracker.predict()
        cbox = contour_box(frame)
        if cbox is not None and box_match(cbox, tbox, match):
            tracker.losses += 0.5
            final, source = cbox, "contour"
            tracker.kalman_filter(cbox)
        else:
            tracker.current = tbox
            final, source = tbox, "track"
            tracker.losses += 1
    if tracker is not None and tracker.losses > max_age:
        tracker, final, source = None, None, "none"
    return tracker, StepResult(final, source)


@dataclass
class TrackParams:
    min_confidence: float = MIN_CONFIDENCE
    max_age: float = MAX_AGE
    match: MatchParams = field(default_factory=MatchParams)
    kalman: KalmanParams = field(default_factory=KalmanParams)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        m = MatchParams(**d.pop("match", {}))
        k = KalmanParams(**d.pop("kalman", {}))
        return cls(match=m, kalman=k, **d)


def best_detection(dets: Iterable[Detection], min_confidence: float = MIN_CONFIDENCE
                   ) -> Optional[BBox]:
    """Highest-confidence detection passing the threshold."""
    kept = [d for d in dets if d.confidence >= min_confidence]
    if not kept:
        return None
    return max(kept, key=lambda d: d.confidence).box


def run_tracker(frames: Sequence[np.ndarray], detections: Mapping[int, Sequence[Detection]],
                params: TrackParams = TrackParams()) -> List[StepResult]:
    tracker = None
    out = []
    for k, frame in enumerate(frames):
        det = best_detection(detections.get(k, ()), params.min_confidence)
        if det is not None:
            det = BBox.from_corners(tuple(det), frame.shape)
        tracker, res = track_step(tracker, frame, det, params.match, params.kalman,
                                  params.max_age)
        out.append(res)
    return out


# ---- CSV I/O -----------------------------------------------------------

DETECTION_COLUMNS = ["video_id", "frame_idx", "x1", "y1", "x2", "y2", "confidence"]
TRACK_COLUMNS = ["video_id", "frame_idx", "x1", "y1", "x2", "y2", "source"]


def write_detections(path, rows: Mapping[str, Mapping[int, Sequence[Detection]]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_COLUMNS)
        for vid in sorted(rows):
            for k in sorted(rows[vid]):
                for d in rows[vid][k]:
                    w.writerow([vid, k, *tuple(d.box), f"{d.confidence:.6f}"])


def read_detections(path) -> Dict[str, Dict[int, List[Detection]]]:
    out: Dict[str, Dict[int, List[Detection]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DETECTION_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for line, r in enumerate(reader, start=2):
            try:
                box = BBox(int(r["x1"]), int(r["y1"]), int(r["x2"]), int(r["y2"]))
                det = Detection(box, float(r["confidence"]))
            except ValueError as e:
                raise ValueError(f"{path}:{line}: {e}") from None
            out.setdefault(r["video_id"], {}).setdefault(int(r["frame_idx"]), []).append(det)
    return out


def write_tracks(path, tracks: Mapping[str, Sequence[StepResult]]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACK_COLUMNS)
        for vid in sorted(tracks):
            for k, res in enumerate(tracks[vid]):
                coords = tuple(res.box) if res.box is not None else ("", "", "", "")
                w.writerow([vid, k, *coords, res.source])


def read_tracks(path) -> Dict[str, List[Optional[BBox]]]:
    out: Dict[str, List[Optional[BBox]]] = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            boxes = out.setdefault(r["video_id"], [])
            k = int(r["frame_idx"])
            while len(boxes) <= k:
                boxes.append(None)
            if r["source"] != "none":
                boxes[k] = BBox(int(r["x1"]), int(r["y1"]), int(r["x2"]), int(r["y2"]))
    return out
