"""Binary detection metrics: ACC, TPR, FPR, F1 and rank-based AUC.

Malicious (label 1) is the positive class.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InputError

THRESHOLD = 0.5
METRIC_NAMES = ("acc", "tpr", "fpr", "f1", "auc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(probs: Sequence[float], labels: Sequence[int],
              threshold: float = THRESHOLD) -> ConfusionCounts:
    """Counts at ``threshold``; a probability equal to it predicts positive."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise InputError(f"{p.size} predictions but {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise InputError("labels must be 0 or 1")
    pred = p >= threshold
    pos = y == 1
    return ConfusionCounts(tp=int(np.sum(pred & pos)), fp=int(np.sum(pred & ~pos)),
                           tn=int(np.sum(~pred & ~pos)), fn=int(np.sum(~pred & pos)))


@dataclass(frozen=True)
class Metrics:
    acc: float
    tpr: float
    fpr: float
    f1: float
    degenerate: tuple[str, ...] = ()


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(c: ConfusionCounts) -> Metrics:
    """Rates from counts; a zero denominator yields 0 and is listed in ``degenerate``."""
    if c.total == 0:
        raise InputError("cannot compute metrics over zero samples")
    flags: list[str] = []
    tpr = _ratio(c.tp, c.tp + c.fn, "tpr", flags)
    fpr = _ratio(c.fp, c.fp + c.tn, "fpr", flags)
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1", flags)
    return Metrics((c.tp + c.tn) / c.total, tpr, fpr, f1, tuple(flags))


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with average ranks, so tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC needs at least one positive and one negative sample")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate_scores(probs: Sequence[float], labels: Sequence[int]) -> dict[str, float]:
    """All five table metrics; AUC is NaN when only one class is present."""
    m = metrics(confusion(probs, labels))
    try:
        a = auc(probs, labels)
    except InputError:
        a = float("nan")
    return {"acc": m.acc, "tpr": m.tpr, "fpr": m.fpr, "f1": m.f1, "auc": a}


def aggregate_clients(records: Sequence[Mapping[str, float]],
                      keys: Sequence[str] = METRIC_NAMES) -> dict[str, float]:
    """Unweighted mean of each metric across client records."""
    if not records:
        raise InputError("no client records to aggregate")
    out = {}
    for k in keys:
        vals = [float(r[k]) for r in records if k in r]
        if vals:
            out[k] = float(np.mean(vals))
    return out
