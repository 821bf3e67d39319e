"""Pixel-level vessel metrics: ACC, SE, SP, F1 and ROC AUC inside the FOV."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class Metrics:
    acc: float
    se: float
    sp: float
    f1: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    flags: Tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def from_counts(cls, tp: int, fp: int, tn: int, fn: int, auc: float = math.nan) -> "Metrics":
        flags = []

        def ratio(num, den, flag):
            if den == 0:
                flags.append(flag)
                return math.nan
            return num / den

        acc = ratio(tp + tn, tp + tn + fp + fn, "empty")
        se = ratio(tp, tp + fn, "se_undefined")
        sp = ratio(tn, tn + fp, "sp_undefined")
        f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1_undefined")
        if math.isnan(auc):
            flags.append("auc_undefined")
        return cls(acc, se, sp, f1, auc, int(tp), int(fp), int(tn), int(fn), tuple(flags))

    def as_row(self) -> dict:
        d = asdict(self)
        d["flags"] = "|".join(self.flags)
        return d

    @property
    def fitness(self) -> float:
        """F1 with undefined values mapped to 0."""
        return 0.0 if math.isnan(self.f1) else float(self.f1)


def _select(pred, target, fov):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise MetricError(f"prediction {pred.shape} and target {target.shape} differ")
    if fov is not None:
        fov = np.asarray(fov).astype(bool)
        if fov.shape != pred.shape:
            raise MetricError(f"fov {fov.shape} and prediction {pred.shape} differ")
        return pred[fov], target[fov].astype(bool)
    return pred.reshape(-1), target.reshape(-1).astype(bool)


def confusion(pred, target, fov=None, threshold: float = 0.5) -> Tuple[int, int, int, int]:
    if not 0.0 < threshold < 1.0:
        raise MetricError(f"threshold must lie in (0, 1), got {threshold}")
    p, y = _select(pred, target, fov)
    hat = p >= threshold
    tp = int(np.count_nonzero(hat & y))
    fp = int(np.count_nonzero(hat & ~y))
    fn = int(np.count_nonzero(~hat & y))
    tn = int(np.count_nonzero(~hat & ~y))
    return tp, fp, tn, fn


def auc(pred, target, fov=None) -> float:
    """Trapezoidal ROC area over all distinct score thresholds.

    Tied scores form one ROC segment, which yields half credit per tied
    positive/negative pair (the Mann-Whitney convention).
    """
    p, y = _select(pred, target, fov)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    order = np.argsort(-p, kind="mergesort")
    ps, ys = p[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(ps)), ps.size - 1]
    tps = np.cumsum(ys)[last]
    fps = (last + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def confusion_and_metrics(pred, target, fov=None, threshold: float = 0.5, with_auc: bool = True) -> Metrics:
    tp, fp, tn, fn = confusion(pred, target, fov, threshold)
    a = math.nan
    if with_auc:
        try:
            a = auc(pred, target, fov)
        except MetricError:
            a = math.nan
    return Metrics.from_counts(tp, fp, tn, fn, a)


def pairwise_auc(pred, target, fov=None) -> float:
    """O(n^2) Mann-Whitney reference: P(score_pos > score_neg) + 0.5 P(tie)."""
    p, y = _select(pred, target, fov)
    pos, neg = p[y], p[~y]
    if pos.size == 0 or neg.size == 0:
        raise MetricError("AUC needs both classes present")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def overlay(pred, target, fov=None, threshold: float = 0.5) -> np.ndarray:
    """RGB uint8 image: TP green, TN black, FP blue, FN red; outside FOV grey."""
    p = np.asarray(pred) >= threshold
    y = np.asarray(target).astype(bool)
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    img[p & y] = (0, 255, 0)
    img[p & ~y] = (0, 0, 255)
    img[~p & y] = (255, 0, 0)
    if fov is not None:
        img[~np.asarray(fov).astype(bool)] = (96, 96, 96)
    return img
