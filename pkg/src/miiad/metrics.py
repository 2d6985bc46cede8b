"""Detection and segmentation metrics: image AUROC, pixel AUROC, AUPRO."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from scipy import ndimage
from sklearn.metrics import roc_auc_score

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds descending, fpr, tpr) at every distinct score, from (0, 0) to (1, 1)."""
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.all() or not y.any():
        raise ValueError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[s[1:] != s[:-1], True]
    tpr = np.cumsum(y)[last] / y.sum()
    fpr = np.cumsum(~y)[last] / (~y).sum()
    return np.r_[np.inf, s[last]], np.r_[0.0, fpr], np.r_[0.0, tpr]


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve; ties count one half. Needs both classes present."""
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.all() or not y.any():
        raise ValueError("AUROC needs at least one positive and one negative")
    return float(roc_auc_score(y, s))


def pixel_auroc(score_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    """AUROC over every pixel of every map, pooled."""
    s = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in score_maps])
    y = np.concatenate([np.asarray(m).astype(bool).ravel() for m in gt_masks])
    return auroc(s, y)


def label_regions(gt: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    """Connected components of a binary mask (8- or 4-connected); background is 0."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = EIGHT_CONNECTED if connectivity == 8 else FOUR_CONNECTED
    return ndimage.label(np.asarray(gt).astype(bool), structure=structure)


def pro_curve(score_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray],
              connectivity: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Exact (fpr, pro) pairs at every distinct score threshold, starting at (0, 0).

    The false-positive rate is taken over all defect-free pixels; the per-region
    overlap is averaged over all connected defect regions of all images.
    """
    scores, weights, negative = [], [], []
    n_regions = 0
    for smap, gt in zip(score_maps, gt_masks):
        smap = np.asarray(smap, dtype=np.float64)
        if smap.shape != np.shape(gt):
            raise ValueError(f"score map {smap.shape} and mask {np.shape(gt)} differ")
        lab, n = label_regions(gt, connectivity)
        sizes = np.bincount(lab.ravel(), minlength=n + 1).astype(np.float64)
        w = np.where(lab > 0, 1.0 / sizes[lab], 0.0)
        scores.append(smap.ravel())
        weights.append(w.ravel())
        negative.append((lab == 0).ravel())
        n_regions += n
    s = np.concatenate(scores)
    w = np.concatenate(weights)
    neg = np.concatenate(negative)
    if n_regions == 0:
        raise ValueError("AUPRO needs at least one defect region")
    if not neg.any():
        raise ValueError("AUPRO needs at least one defect-free pixel")
    order = np.argsort(-s, kind="stable")
    s, w, neg = s[order], w[order], neg[order]
    fpr = np.cumsum(neg) / neg.sum()
    pro = np.cumsum(w) / n_regions
    # keep the last index of each run of equal scores
    last = np.r_[s[1:] != s[:-1], True]
    return np.r_[0.0, fpr[last]], np.r_[0.0, pro[last]]


def area_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoid area under a piecewise-linear curve on ``[0, limit]``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = x <= limit
    xs, ys = x[keep], y[keep]
    if xs[-1] < limit:
        i = np.searchsorted(x, limit, side="right")
        if i < len(x):
            # interpolate on the segment that crosses the limit
            x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
            y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        else:
            y_lim = y[-1]
        xs, ys = np.r_[xs, limit], np.r_[ys, y_lim]
    return float(np.trapezoid(ys, xs))


def aupro(score_maps: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray], fpr_limit: float = 0.3,
          connectivity: int = 8) -> float:
    """Area under the per-region-overlap curve up to ``fpr_limit``, divided by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must be in (0, 1]")
    fpr, pro = pro_curve(score_maps, gt_masks, connectivity)
    return area_to_limit(fpr, pro, fpr_limit) / fpr_limit
