"""ROC and PR areas, the per-level results table and the tolerance sweep."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .windows import T_WINDOW

RESULT_COLUMNS = ["method", "level", "variant", "roc_c_mu", "roc_c_sigma", "pr_c_mu",
                  "pr_c_sigma"]
SWEEP_COLUMNS = ["method", "variant", "alpha", "n_pos", "roc_w_mu", "roc_w_sigma", "pr_w_mu",
                 "pr_w_sigma"]


class UndefinedMetric(ValueError):
    """The metric is undefined for this labelling (e.g. only one class present)."""


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if s.size == 0:
        raise UndefinedMetric("empty score set")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate P(s_pos > s_neg) + P(tie)/2 via midranks."""
    s, y = _validate(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("ROC AUC needs both classes")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision; tied scores enter as one threshold."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("PR AUC needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends].astype(np.float64)
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0.0, tp]) / n_pos
    return float((precision * recall_step).sum())


def safe_metric(fn, scores, labels) -> float:
    try:
        return fn(scores, labels)
    except UndefinedMetric:
        return math.nan


def _group(rows: Iterable[dict]) -> Dict[str, List[dict]]:
    out: Dict[str, List[dict]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r)
    return out


def frame_results(method: str, frame_rows: Sequence[dict]) -> List[dict]:
    results = []
    for variant, rows in _group(frame_rows).items():
        y = np.array([r["ground_truth"] for r in rows])
        mu = np.array([r["c_mu"] for r in rows])
        sg = np.array([r["c_sigma"] for r in rows])
        results.append({
            "method": method, "level": "frame", "variant": variant,
            "roc_c_mu": safe_metric(roc_auc, mu, y), "roc_c_sigma": safe_metric(roc_auc, sg, y),
            "pr_c_mu": safe_metric(pr_auc, mu, y), "pr_c_sigma": safe_metric(pr_auc, sg, y),
        })
    return results


def tolerance_sweep(method: str, window_rows: Sequence[dict],
                    alphas: Sequence[int] = tuple(range(1, T_WINDOW + 1))) -> List[dict]:
    """ROC/PR AUC of W_mu and W_sigma for every tolerance alpha.

    ``ground_truth`` of a window row is its count of fall frames.
    """
    out = []
    for variant, rows in _group(window_rows).items():
        counts = np.array([r["ground_truth"] for r in rows])
        mu = np.array([r["w_mu"] for r in rows])
        sg = np.array([r["w_sigma"] for r in rows])
        for a in alphas:
            y = (counts >= a).astype(int)
            out.append({
                "method": method, "variant": variant, "alpha": int(a), "n_pos": int(y.sum()),
                "roc_w_mu": safe_metric(roc_auc, mu, y), "roc_w_sigma": safe_metric(roc_auc, sg, y),
                "pr_w_mu": safe_metric(pr_auc, mu, y), "pr_w_sigma": safe_metric(pr_auc, sg, y),
            })
    return out


def window_results(sweep: Sequence[dict]) -> List[dict]:
    """Sweep rows rendered in the results-table layout (level ``window_a<alpha>``)."""
    return [{
        "method": r["method"], "level": f"window_a{r['alpha']}", "variant": r["variant"],
        "roc_c_mu": r["roc_w_mu"], "roc_c_sigma": r["roc_w_sigma"],
        "pr_c_mu": r["pr_w_mu"], "pr_c_sigma": r["pr_w_sigma"],
    } for r in sweep]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return v


def write_table(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_table(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k not in ("method", "level", "variant"):
                r[k] = float(v)
    return rows


def roc_curve(scores, labels):
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = ends + 1 - tp
    return np.r_[0, fp / max(fp[-1], 1)], np.r_[0, tp / max(tp[-1], 1)]


def plot_curves(path, frame_rows: Sequence[dict], sweep: Sequence[dict], title: str = ""):
    """ROC curves of the frame scores and the tolerance sweep, saved as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed id salt and metadata keep the SVG reproducible
    with matplotlib.rc_context({"svg.hashsalt": "thermal-fall"}):
        _draw_curves(plt, path, frame_rows, sweep, title)


def _draw_curves(plt, path, frame_rows, sweep, title):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for variant, rows in _group(frame_rows).items():
        y = np.array([r["ground_truth"] for r in rows])
        if y.min() == y.max():
            continue
        for key in ("c_mu", "c_sigma"):
            fpr, tpr = roc_curve([r[key] for r in rows], y)
            ax1.plot(fpr, tpr, label=f"{variant} {key}")
    ax1.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax1.set_xlabel("false positive rate")
    ax1.set_ylabel("true positive rate")
    ax1.legend(fontsize=7)
    by_var: Dict[str, List[dict]] = {}
    for r in sweep:
        by_var.setdefault(r["variant"], []).append(r)
    for variant, rows in by_var.items():
        a = [r["alpha"] for r in rows]
        ax2.plot(a, [r["roc_w_sigma"] for r in rows], marker="o", label=f"{variant} W_sigma")
        ax2.plot(a, [r["roc_w_mu"] for r in rows], marker="x", ls="--", label=f"{variant} W_mu")
    ax2.set_xlabel("tolerance alpha")
    ax2.set_ylabel("ROC AUC")
    ax2.legend(fontsize=7)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
