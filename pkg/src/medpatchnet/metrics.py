"""Classification and localization metrics with case-level bootstrap CIs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .saliency import normalize_map


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. only one class present)."""


def _binary(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0/1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise MetricError("metric needs at least one positive and one negative label")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC from mid-ranks; tied pairs count one half."""
    s, y = _binary(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ClassMetrics:
    auroc: float
    sensitivity: float
    specificity: float
    accuracy: float
    chosen_threshold: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def optimal_threshold(scores, labels) -> float:
    """Midpoint threshold maximizing sensitivity + specificity; ties go to the higher threshold.

    Scores strictly above the threshold are called positive.
    """
    s, y = _binary(scores, labels)
    cands = threshold_candidates(s)
    pred = s[None, :] > cands[:, None]
    sens = (pred & y).sum(axis=1) / y.sum()
    spec = (~pred & ~y).sum(axis=1) / (~y).sum()
    j = sens + spec
    best = np.flatnonzero(j == j.max())
    return float(cands[best[-1]])


def confusion(scores, labels, threshold: float) -> Tuple[int, int, int, int]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s > threshold
    return int((pred & y).sum()), int((pred & ~y).sum()), int((~pred & y).sum()), int((~pred & ~y).sum())


def class_metrics(scores, labels, threshold: float) -> ClassMetrics:
    tp, fp, fn, tn = confusion(scores, labels, threshold)
    return ClassMetrics(
        auroc=auroc(scores, labels),
        sensitivity=tp / (tp + fn),
        specificity=tn / (tn + fp),
        accuracy=(tp + tn) / (tp + fp + fn + tn),
        chosen_threshold=threshold,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


# --------------------------------------------------------------- localization
def hit_rate(cases: Iterable[Tuple[Tuple[int, int], np.ndarray]]) -> float:
    """Fraction of (point, mask) cases whose point lies inside the mask."""
    hits = []
    for (r, c), mask in cases:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise MetricError("hit rate is only defined for nonempty ground-truth masks")
        hits.append(bool(mask[r, c]))
    if not hits:
        raise MetricError("hit rate needs at least one case")
    return float(np.mean(hits))


def iou(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class LocalizationCase:
    sample_id: str
    class_id: int
    gt_mask: np.ndarray
    predicted_positive: bool
    pred_mask: Optional[np.ndarray] = None
    saliency: Optional[np.ndarray] = None

    @property
    def gt_present(self) -> bool:
        return bool(np.asarray(self.gt_mask).any())

    @property
    def category(self) -> str:
        if self.gt_present:
            return "TP" if self.predicted_positive else "FN"
        return "FP" if self.predicted_positive else "TN"

    def effective_prediction(self) -> np.ndarray:
        """Segmentation the case is scored with: empty unless the class was predicted."""
        if self.predicted_positive and self.pred_mask is not None:
            return np.asarray(self.pred_mask, dtype=bool)
        return np.zeros(np.shape(self.gt_mask), dtype=bool)

    def case_iou(self) -> float:
        return iou(self.effective_prediction(), self.gt_mask)


def miou_all_cases(cases: Sequence[LocalizationCase]) -> float:
    """Mean IoU over TP, FP and FN cases (TN excluded)."""
    vals = [c.case_iou() for c in cases if c.category != "TN"]
    if not vals:
        raise MetricError("no TP/FP/FN cases to average")
    return float(np.mean(vals))


def miou_tp_only(cases: Sequence[LocalizationCase]) -> float:
    vals = [c.case_iou() for c in cases if c.category == "TP"]
    if not vals:
        raise MetricError("no true-positive cases to average")
    return float(np.mean(vals))


THRESHOLD_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


def saliency_threshold_search(cases: Sequence[LocalizationCase], grid: Sequence[float] = THRESHOLD_GRID) -> float:
    """Segmentation threshold maximizing all-cases mIoU.

    Ties prefer the smallest total predicted area.  Masks shrink as the
    threshold rises, so equal area means identical masks; among those the
    highest threshold is kept.  Each case must carry its saliency map.
    """
    scored = [c for c in cases if c.category != "TN"]
    if not scored:
        raise MetricError("no TP/FP/FN cases to search over")
    norm = np.stack([normalize_map(c.saliency) for c in scored])
    gt = np.stack([np.asarray(c.gt_mask, dtype=bool) for c in scored])
    active = np.array([c.predicted_positive for c in scored])[:, None, None]
    gt_area = gt.sum(axis=(1, 2))
    best: Optional[Tuple[float, int, float]] = None
    for t in grid:
        pred = (norm >= t) & active
        inter = (pred & gt).sum(axis=(1, 2))
        union = pred.sum(axis=(1, 2)) + gt_area - inter
        ious = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
        score, area = float(ious.mean()), int(pred.sum())
        if best is None or score > best[0] or (score == best[0] and area <= best[1]):
            best = (score, area, float(t))
    return best[2]


# ------------------------------------------------------------------ bootstrap
def resample_indices(n_items: int, n_resamples: int, seed: int):
    """Case-level resampling; resample ``k`` uses its own stream keyed by ``(seed, k)``."""
    for k in range(n_resamples):
        yield np.random.default_rng([seed, k]).integers(0, n_items, n_items)


def bootstrap_distribution(
    statistic: Callable[[np.ndarray], Optional[float]], n_items: int, n_resamples: int, seed: int
) -> np.ndarray:
    """Resampled statistic values; NaN where the statistic is undefined on a resample."""
    out = np.full(n_resamples, np.nan)
    for k, idx in enumerate(resample_indices(n_items, n_resamples, seed)):
        try:
            v = statistic(idx)
        except MetricError:
            v = None
        if v is not None and np.isfinite(v):
            out[k] = v
    return out


def percentile_interval(dist: np.ndarray, level: float = 0.95) -> Tuple[float, float]:
    vals = dist[np.isfinite(dist)]
    if vals.size == 0:
        raise MetricError("statistic undefined on every resample")
    alpha = (1 - level) / 2
    lo, hi = np.percentile(vals, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def bootstrap_ci(
    data: Union[Sequence[float], np.ndarray, Callable[[np.ndarray], Optional[float]]],
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    n_items: Optional[int] = None,
) -> Tuple[float, float]:
    """Percentile bootstrap interval.

    ``data`` is either a 1-D sample (the statistic is its mean) or a
    callable mapping resampled case indices to a statistic, in which case
    ``n_items`` gives the number of cases.
    """
    if callable(data):
        if n_items is None or n_items < 1:
            raise ValueError("n_items is required with a statistic callable")
        stat = data
    else:
        values = np.asarray(data, dtype=np.float64)
        if values.size == 0:
            raise ValueError("bootstrap needs a nonempty sample")
        n_items = values.size

        def stat(idx):
            return float(values[idx].mean())

    return percentile_interval(bootstrap_distribution(stat, n_items, n_resamples, seed), level)
