"""Tracking metrics over per-frame IoUs.

Success counts frames with IoU strictly above a threshold and is averaged over
the 21-point grid {0, 0.05, ..., 1}. AO is the mean IoU and SR@t the success
fraction at t.

Long-term Precision / Recall follow the IoU-weighted protocol. At confidence
threshold theta the tracker reports the target present on frames with
confidence >= theta. Precision is the mean IoU over reported frames, counting
0 where the target is actually absent. Recall is the mean IoU over frames
where the target is visible, counting 0 where the tracker reported absence.
F = 2 Pr Re / (Pr + Re), maximized over thresholds.

Center precision at 20 px is offered as a convenience; it is not one of the
published protocols' normalized variants.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .boxes import iou, xywh_to_xyxy

GRID_STEP = 0.05


def ious(pred_xywh, gt_xywh) -> np.ndarray:
    """Per-frame IoU of (n, 4) xywh boxes; negative extents count as empty."""
    p = np.asarray(pred_xywh, dtype=np.float64).reshape(-1, 4).copy()
    g = np.asarray(gt_xywh, dtype=np.float64).reshape(-1, 4)
    if len(p) != len(g):
        raise ValueError(f"{len(p)} predicted boxes vs {len(g)} gt boxes")
    p[:, 2:] = np.maximum(p[:, 2:], 0.0)
    return iou(xywh_to_xyxy(p), xywh_to_xyxy(g))


def _nonempty(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ValueError("metric needs at least one frame")
    return v


def success_curve(overlaps, step: float = GRID_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Thresholds on a uniform grid over [0, 1] and the fraction of frames with IoU > t."""
    v = _nonempty(overlaps)
    n = int(round(1.0 / step))
    thresholds = np.linspace(0.0, 1.0, n + 1)
    return thresholds, (v[None, :] > thresholds[:, None]).mean(axis=1)


def success_auc(overlaps, step: float = GRID_STEP) -> float:
    return float(success_curve(overlaps, step)[1].mean())


def ao_sr(overlaps) -> tuple[float, float, float]:
    v = _nonempty(overlaps)
    return float(v.mean()), float(np.mean(v > 0.5)), float(np.mean(v > 0.75))


def f_measure(pr: float, re: float) -> float:
    return 0.0 if pr + re == 0 else 2 * pr * re / (pr + re)


def precision_recall(overlaps, confidences, visible, threshold: float) -> tuple[float, float]:
    v = _nonempty(overlaps)
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    vis = np.asarray(visible, dtype=bool).reshape(-1)
    if not len(v) == len(conf) == len(vis):
        raise ValueError("overlaps, confidences and visibility differ in length")
    reported = conf >= threshold
    credited = np.where(vis & reported, v, 0.0)
    pr = float(credited[reported].mean()) if reported.any() else 0.0
    re = float(credited[vis].mean()) if vis.any() else 0.0
    return pr, re


@dataclass(frozen=True)
class FScore:
    f: float
    precision: float
    recall: float
    threshold: float


def f_score(overlaps, confidences, visible, thresholds=None) -> FScore:
    """Best F over ``thresholds`` (default: every distinct confidence)."""
    if thresholds is None:
        thresholds = np.unique(np.asarray(confidences, dtype=np.float64))
    best = None
    for t in np.asarray(thresholds, dtype=np.float64).reshape(-1):
        pr, re = precision_recall(overlaps, confidences, visible, t)
        cand = FScore(f_measure(pr, re), pr, re, float(t))
        if best is None or cand.f > best.f:
            best = cand
    if best is None:
        raise ValueError("f_score needs at least one threshold")
    return best


def center_precision(pred_xywh, gt_xywh, radius: float = 20.0) -> float:
    p = np.asarray(pred_xywh, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_xywh, dtype=np.float64).reshape(-1, 4)
    d = np.linalg.norm((p[:, :2] + p[:, 2:] / 2) - (g[:, :2] + g[:, 2:] / 2), axis=1)
    return float(np.mean(d <= radius))


@dataclass
class SequenceResult:
    pred: np.ndarray  # (n, 4) xywh
    confidence: np.ndarray  # (n,)
    gt: np.ndarray  # (n, 4) xywh
    visible: np.ndarray  # (n,) bool

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64).reshape(-1, 4)
        self.gt = np.asarray(self.gt, dtype=np.float64).reshape(-1, 4)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if not len(self.pred) == len(self.gt) == len(self.confidence) == len(self.visible):
            raise ValueError(f"{len(self.pred)} predictions vs {len(self.gt)} gt frames")


REPORT_COLUMNS = ("sequence", "frames", "AO", "SR50", "SR75", "AUC", "F", "Pr", "Re", "CP20")


def evaluate(results: dict[str, SequenceResult], skip_first: bool = True) -> list[dict]:
    """One report row per sequence plus an ``ALL`` row pooling every frame.

    Overlap metrics use visible frames only; the F-score uses all frames.
    Frame 0 (the given init box) is skipped unless ``skip_first`` is false.
    """
    rows = []
    pooled = {"o": [], "c": [], "v": [], "p": [], "g": []}
    for name, r in results.items():
        s = slice(1, None) if skip_first and len(r.gt) > 1 else slice(None)
        o, c, v = ious(r.pred[s], r.gt[s]), r.confidence[s], r.visible[s]
        rows.append(_row(name, o, c, v, r.pred[s], r.gt[s]))
        for k, a in zip("ocvpg", (o, c, v, r.pred[s], r.gt[s])):
            pooled[k].append(a)
    if len(rows) > 1:
        cat = {k: np.concatenate(a) for k, a in pooled.items()}
        rows.append(_row("ALL", cat["o"], cat["c"], cat["v"], cat["p"], cat["g"]))
    return rows


def _row(name, o, c, v, p, g) -> dict:
    vis = v if v.any() else np.ones_like(v)
    ao, sr50, sr75 = ao_sr(o[vis])
    fs = f_score(o, c, v)
    return {
        "sequence": name,
        "frames": len(o),
        "AO": ao,
        "SR50": sr50,
        "SR75": sr75,
        "AUC": success_auc(o[vis]),
        "F": fs.f,
        "Pr": fs.precision,
        "Re": fs.recall,
        "CP20": center_precision(p[vis], g[vis]),
    }


def write_report(dest, rows: list[dict]) -> None:
    """CSV report to a path or an open text stream."""
    if hasattr(dest, "write"):
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["sequence"], r["frames"]] + [f"{r[c]:.6f}" for c in REPORT_COLUMNS[2:]])
        return
    with open(dest, "w", newline="") as fh:
        write_report(fh, rows)


def write_curve(path, overlaps, step: float = GRID_STEP) -> None:
    t, frac = success_curve(overlaps, step)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fraction"))
        for a, b in zip(t, frac):
            w.writerow((f"{a:.4f}", f"{b:.6f}"))
