"""Evaluation metrics: image ROCAUC, pixel ROCAUC, and the PRO curve.

ROCAUC is the tie-corrected Mann-Whitney statistic, which equals the
trapezoidal area under the ROC curve.  The PRO curve sweeps descending
score thresholds over every test pixel pooled across the dataset and
averages per-component overlap over all ground-truth components; the
integrated value is normalized over FPR in [0, fpr_limit].

The threshold sweep is exact: every distinct score value is a
threshold.  Ties enter as one group, the curve is anchored at
(FPR=0, PRO=0) ahead of the first group, and the final point is the
linear interpolation at exactly fpr_limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    """A metric's preconditions do not hold (e.g. one class missing)."""


@dataclass
class ComponentSet:
    """Labeled 8-connected regions: 0 is background, 1..K components,
    numbered by first raster-scan pixel."""

    labels: np.ndarray
    count: int


@dataclass
class ClassResult:
    i_roc: float | None
    p_roc: float | None
    pro: float | None
    pro_curve: np.ndarray | None  # (T, 2) columns (fpr, pro)

    def as_dict(self) -> dict:
        return {"i_roc": self.i_roc, "p_roc": self.p_roc, "pro": self.pro}


@dataclass
class EvalReport:
    per_class: dict[str, ClassResult] = field(default_factory=dict)

    def mean(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for key in ("i_roc", "p_roc", "pro"):
            vals = [getattr(r, key) for r in self.per_class.values()]
            out[key] = None if any(v is None for v in vals) or not vals \
                else float(np.mean(vals))
        return out


def _scores_and_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels disagree: {s.shape} vs {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    """P(score of a positive > score of a negative) + half the ties."""
    s, y = _scores_and_labels(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs both classes")
    ranks = rankdata(s)  # average ranks on ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _pooled_pixels(maps, masks) -> tuple[np.ndarray, np.ndarray]:
    if len(maps) != len(masks) or not maps:
        raise ValueError("need one mask per map")
    flat_scores, flat_masks = [], []
    for m, gt in zip(maps, masks):
        arr = np.asarray(getattr(m, "map", m), dtype=np.float64)
        gt = np.asarray(gt, dtype=bool)
        if arr.shape != gt.shape:
            raise ValueError(f"map/mask shape mismatch: {arr.shape} vs {gt.shape}")
        flat_scores.append(arr.ravel())
        flat_masks.append(gt.ravel())
    return np.concatenate(flat_scores), np.concatenate(flat_masks)


def pixel_roc_auc(maps, masks) -> float:
    """ROCAUC with every test pixel of the dataset as one sample."""
    scores, gt = _pooled_pixels(maps, masks)
    return roc_auc(scores, gt.astype(np.int64))


_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(mask: np.ndarray) -> ComponentSet:
    """8-connected regions of a boolean mask, labels ordered by each
    region's first pixel in raster order."""
    mask = np.asarray(mask, dtype=bool)
    raw, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return ComponentSet(labels=raw.astype(np.int64), count=0)
    flat = raw.ravel()
    first = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first[1:], kind="stable")  # old label -> rank
    remap = np.zeros(count + 1, dtype=np.int64)
    remap[1:][order] = np.arange(1, count + 1)
    return ComponentSet(labels=remap[raw], count=count)


def pro_curve(maps, masks, fpr_limit: float = 0.3) -> tuple[np.ndarray, float]:
    """Per-region overlap curve and its normalized integral.

    Every anomalous pixel contributes 1/(K * component size) of PRO when
    the descending threshold reaches its score, so one cumulative sweep
    over the sorted pooled scores yields the exact curve.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    scores, gt = _pooled_pixels(maps, masks)

    weights = np.zeros(scores.size)
    n_components = 0
    offset = 0
    for m, mask in zip(maps, masks):
        comp = connected_components(np.asarray(mask, dtype=bool))
        if comp.count:
            labels = comp.labels.ravel()
            sizes = np.bincount(labels, minlength=comp.count + 1)
            inside = labels > 0
            weights[offset + np.nonzero(inside)[0]] = 1.0 / sizes[labels[inside]]
            n_components += comp.count
        offset += comp.labels.size
    if n_components == 0:
        raise UndefinedMetricError("pro_curve needs at least one gt component")
    n_neg = int((~gt).sum())
    if n_neg == 0:
        raise UndefinedMetricError("pro_curve needs at least one normal pixel")
    weights /= n_components

    order = np.argsort(-scores)
    s_sorted = scores[order]
    ends = np.flatnonzero(np.diff(s_sorted) != 0)
    ends = np.concatenate([ends, [s_sorted.size - 1]])
    pro = np.cumsum(weights[order])[ends]
    fpr = np.cumsum(~gt[order])[ends] / n_neg

    fpr = np.concatenate([[0.0], fpr])
    pro = np.concatenate([[0.0], pro])

    inside = fpr <= fpr_limit
    last = int(inside.sum())  # points are ascending in fpr
    fpr_in, pro_in = fpr[:last], pro[:last]
    if last < fpr.size and (last == 0 or fpr_in[-1] < fpr_limit):
        lo, hi = last - 1, last
        t = (fpr_limit - fpr[lo]) / (fpr[hi] - fpr[lo])
        fpr_in = np.concatenate([fpr_in, [fpr_limit]])
        pro_in = np.concatenate([pro_in, [pro[lo] + t * (pro[hi] - pro[lo])]])
    curve = np.column_stack([fpr_in, pro_in])
    integrated = float(np.trapezoid(pro_in, fpr_in) / fpr_limit)
    return curve, integrated


def evaluate_class(image_scores, image_labels, maps, masks,
                   fpr_limit: float = 0.3) -> ClassResult:
    """All three metrics for one object class; metrics whose
    preconditions fail come back as None."""
    try:
        i_roc = roc_auc(image_scores, image_labels)
    except UndefinedMetricError:
        i_roc = None
    try:
        p_roc = pixel_roc_auc(maps, masks)
    except UndefinedMetricError:
        p_roc = None
    try:
        curve, pro = pro_curve(maps, masks, fpr_limit)
    except UndefinedMetricError:
        curve, pro = None, None
    return ClassResult(i_roc=i_roc, p_roc=p_roc, pro=pro, pro_curve=curve)
