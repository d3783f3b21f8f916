"""Reconstruction errors and frame/window anomaly scores."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .training import VariantModels, diff_frames, variant_spec
from .windows import T_WINDOW, SubVideoArrays, WindowSet, window_fall_counts

FRAME_COLUMNS = ["video_id", "frame_idx", "variant", "c_mu", "c_sigma", "ground_truth"]
WINDOW_COLUMNS = ["video_id", "window_start", "variant", "w_mu", "w_sigma", "ground_truth"]


def reconstruction_error(I: np.ndarray, O: np.ndarray, masks: Optional[np.ndarray] = None,
                         per_frame: bool = True) -> np.ndarray:
    """Mean squared error per frame, ``(N, T)``; inside ``masks`` only when given.

    A frame with an empty mask has error 0. With ``per_frame=False`` the
    frames of each window are pooled instead, giving ``(N,)``.
    """
    I = np.asarray(I, dtype=np.float64)
    O = np.asarray(O, dtype=np.float64)
    if I.shape != O.shape:
        raise ValueError(f"shape mismatch {I.shape} vs {O.shape}")
    if I.ndim == 5:
        I, O = I[..., 0], O[..., 0]
    sq = (O - I) ** 2
    axes = (2, 3) if per_frame else (1, 2, 3)
    if masks is None:
        return sq.mean(axis=axes)
    m = np.asarray(masks, dtype=bool)
    if m.ndim == 5:
        m = m[..., 0]
    count = m.sum(axis=axes)
    total = np.where(m, sq, 0.0).sum(axis=axes)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def frame_scores(R: np.ndarray):
    """Per-frame mean and population std of errors over the windows covering it.

    ``R[i, k]`` is the error of frame ``i + k`` in window ``i``. Frame ``j`` is
    covered by windows ``max(0, j-T+1) .. min(j, n_windows-1)``. Returns
    ``(c_mu, c_sigma)`` of length ``n_windows + T - 1``.
    """
    R = np.asarray(R, dtype=np.float64)
    nw, t = R.shape
    n = nw + t - 1
    s = np.zeros(n)
    cnt = np.zeros(n)
    for k in range(t):
        s[k : k + nw] += R[:, k]
        cnt[k : k + nw] += 1
    mu = s / cnt
    dev = np.zeros(n)
    for k in range(t):
        dev[k : k + nw] += (R[:, k] - mu[k : k + nw]) ** 2
    var = dev / cnt
    return mu, np.sqrt(var)


def window_scores(R: np.ndarray):
    """``(w_mu, w_sigma)``: mean and population std over each window's frames."""
    R = np.asarray(R, dtype=np.float64)
    return R.mean(axis=1), R.std(axis=1)


def diff_errors(I, O, union_masks=None) -> np.ndarray:
    """Per-residual-frame errors between the difference frames of ``I`` and ``O``."""
    I = np.asarray(I, dtype=np.float64)
    O = np.asarray(O, dtype=np.float64)
    if I.ndim == 5:
        I, O = I[..., 0], O[..., 0]
    return reconstruction_error(diff_frames(I), diff_frames(O), union_masks)


def diff_window_scores(I, O, union_masks=None):
    return window_scores(diff_errors(I, O, union_masks))


@dataclass
class ScoreTables:
    """Score rows of one model over a list of sub-videos."""

    frame_rows: List[dict]
    window_rows: List[dict]


# score name -> (channel, kind, frame-level?)
def score_plan(variant: str):
    spec = variant_spec(variant)
    if not spec.roi:
        return {"plain": (spec.channels[0], "plain", spec.channels[0] == "thermal")}
    fusion = len(spec.channels) == 2
    plan = {}
    if "thermal" in spec.channels:
        plan["Thermal ROI-score" if fusion else "ROI-score"] = ("thermal", "roi", True)
        if spec.diff:
            plan["Thermal Diff-score" if fusion else "Diff-score"] = ("thermal", "diff", False)
    if "flow" in spec.channels:
        plan["Flow ROI-score"] = ("flow", "roi", False)
    return plan


def score_subvideo(models: VariantModels, sv: SubVideoArrays, batch_size: int = 16):
    """Per-window error tables for every score of the model's variant."""
    spec = variant_spec(models.variant)
    ws = WindowSet([sv])
    plan = score_plan(models.variant)
    tables: Dict[str, List[np.ndarray]] = {name: [] for name in plan}
    for start in range(0, len(ws), batch_size):
        idx = list(range(start, min(start + batch_size, len(ws))))
        batch = ws.batch(idx, roi=spec.roi)
        out = models.reconstruct({ch: batch[ch] for ch in spec.channels}, training=False)
        for name, (ch, kind, _) in plan.items():
            I, O = batch[ch], out[ch]
            if kind == "plain":
                R = reconstruction_error(I, O)
            elif kind == "roi":
                R = reconstruction_error(I, O, batch[f"{ch}_mask"])
            else:
                _, union = diff_frames(I[..., 0], batch["thermal_mask"])
                R = diff_errors(I, O, union)
            tables[name].append(R)
    return {name: np.concatenate(v) for name, v in tables.items()}


def score_subvideos(models: VariantModels, subvideos: Sequence[SubVideoArrays],
                    batch_size: int = 16) -> ScoreTables:
    plan = score_plan(models.variant)
    frame_rows, window_rows = [], []
    for sv in subvideos:
        if sv.n_windows == 0:
            continue
        tables = score_subvideo(models, sv, batch_size)
        counts = window_fall_counts(sv.labels, T_WINDOW)
        for name, (ch, kind, frame_level) in plan.items():
            R = tables[name]
            w_mu, w_sigma = window_scores(R)
            for i in range(len(R)):
                window_rows.append({
                    "video_id": sv.video_id, "window_start": int(sv.frame_idx[i]),
                    "variant": name, "w_mu": float(w_mu[i]), "w_sigma": float(w_sigma[i]),
                    "ground_truth": int(counts[i]),
                })
            if frame_level:
                c_mu, c_sigma = frame_scores(R)
                for j in range(len(c_mu)):
                    frame_rows.append({
                        "video_id": sv.video_id, "frame_idx": int(sv.frame_idx[j]),
                        "variant": name, "c_mu": float(c_mu[j]), "c_sigma": float(c_sigma[j]),
                        "ground_truth": int(sv.labels[j]),
                    })
    return ScoreTables(frame_rows, window_rows)


def _write(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def write_scores(directory, tables: ScoreTables):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write(d / "frame_scores.csv", FRAME_COLUMNS, tables.frame_rows)
    _write(d / "window_scores.csv", WINDOW_COLUMNS, tables.window_rows)


def read_scores(path) -> List[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            for k in ("c_mu", "c_sigma", "w_mu", "w_sigma"):
                if k in r:
                    r[k] = float(r[k])
            r["ground_truth"] = int(r["ground_truth"])
            rows.append(r)
    return rows
