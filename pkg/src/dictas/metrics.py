"""Evaluation metrics for anomaly classification and segmentation.

Threshold-based quantities treat a sample as predicted anomalous when its score
is ``>=`` the threshold; tied scores therefore always move together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

DEFAULT_FPR_LIMIT = 0.3
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class EvalPair:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels differ in length")


def _pair(scores, labels) -> EvalPair:
    return scores if isinstance(scores, EvalPair) else EvalPair(scores, labels)


def auroc(scores, labels=None) -> float:
    """Rank-based ROC AUC with midranks for ties."""
    p = _pair(scores, labels)
    n_pos = int(p.labels.sum())
    n_neg = p.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    ranks = rankdata(p.scores)
    return float((ranks[p.labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _threshold_counts(p: EvalPair):
    """Cumulative TP/FP counts at each distinct score, highest score first."""
    order = np.argsort(-p.scores, kind="stable")
    s = p.scores[order]
    y = p.labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    return tp[last], fp[last]


def average_precision(scores, labels=None) -> float:
    """Step-interpolated area under the precision-recall curve."""
    p = _pair(scores, labels)
    n_pos = int(p.labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive sample")
    tp, fp = _threshold_counts(p)
    # extended precision where the platform has it, one rounding at the end
    tp, fp = tp.astype(np.longdouble), fp.astype(np.longdouble)
    gained = np.diff(np.r_[np.longdouble(0), tp])
    return float(np.sum(gained * (tp / (tp + fp))) / n_pos)


def f1_max(scores, labels=None) -> float:
    """Best F1 over all score thresholds."""
    p = _pair(scores, labels)
    n_pos = int(p.labels.sum())
    if n_pos == 0:
        raise ValueError("F1-max needs at least one positive sample")
    tp, fp = _threshold_counts(p)
    f1 = 2 * tp / (2 * tp + fp + (n_pos - tp))
    return float(f1.max())


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask) > 0, structure=EIGHT_CONNECTED)


def pro_curve(pred_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]):
    """FPR and mean per-region overlap at every distinct threshold.

    Returns arrays starting at the point (0, 0) for a threshold above all scores.
    """
    if len(pred_maps) != len(gt_masks):
        raise ValueError("need one ground-truth mask per prediction")
    scores, weights, negatives = [], [], []
    regions = []
    for pred, gt in zip(pred_maps, gt_masks):
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and mask {gt.shape} differ in shape")
        if not np.isin(gt, (0, 1)).all() and gt.dtype != bool:
            raise ValueError("ground-truth masks must be binary")
        lab, n = label_regions(gt)
        regions.append((lab.ravel(), n))
        scores.append(pred.ravel())
        negatives.append(gt.ravel() == 0)
    n_regions = sum(n for _, n in regions)
    if n_regions == 0:
        raise ValueError("PRO needs at least one anomalous region")
    for lab, n in regions:
        w = np.zeros(lab.shape, dtype=np.float64)
        if n:
            sizes = np.bincount(lab, minlength=n + 1).astype(np.float64)
            inside = lab > 0
            w[inside] = 1.0 / (n_regions * sizes[lab[inside]])
        weights.append(w)
    s = np.concatenate(scores)
    w = np.concatenate(weights)
    neg = np.concatenate(negatives)
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise ValueError("PRO needs normal pixels to measure false positives")
    order = np.argsort(-s, kind="stable")
    s, w, neg = s[order], w[order], neg[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    fpr = np.cumsum(neg)[last] / n_neg
    overlap = np.cumsum(w)[last]
    thresholds = s[last]
    return np.r_[0.0, fpr], np.r_[0.0, overlap], np.r_[np.inf, thresholds]


def integrate_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under (x, y) for ``x <= limit`` with linear interpolation at the limit."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit and keep.size > keep.sum():
        i = int(np.argmax(~keep))  # first point past the limit
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2))


def pro(pred_maps, gt_masks, fpr_limit: float = DEFAULT_FPR_LIMIT) -> float:
    """Normalised area under the per-region-overlap curve up to ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must lie in (0, 1]")
    fpr, overlap, _ = pro_curve(pred_maps, gt_masks)
    return integrate_to_limit(fpr, overlap, fpr_limit) / fpr_limit


def pixel_metrics(pred_maps, gt_masks, fpr_limit: float = DEFAULT_FPR_LIMIT, pooled: bool = True) -> dict[str, float]:
    """Pixel AUROC, PRO and AP.

    ``pooled`` puts every pixel of the set on one curve; otherwise AUROC and AP
    are averaged over images that contain both classes.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in pred_maps]
    masks = [np.asarray(g) > 0 for g in gt_masks]
    if pooled:
        s = np.concatenate([m.ravel() for m in maps])
        y = np.concatenate([g.ravel() for g in masks])
        au, ap = auroc(s, y), average_precision(s, y)
    else:
        usable = [(m, g) for m, g in zip(maps, masks) if 0 < g.sum() < g.size]
        if not usable:
            raise ValueError("no image contains both normal and anomalous pixels")
        au = float(np.mean([auroc(m, g) for m, g in usable]))
        ap = float(np.mean([average_precision(m, g) for m, g in usable]))
    return {"auroc": au, "pro": pro(maps, masks, fpr_limit), "ap": ap}


def image_metrics(scores, labels) -> dict[str, float]:
    p = EvalPair(scores, labels)
    return {"auroc": auroc(p), "f1_max": f1_max(p), "ap": average_precision(p)}
