"""Accuracy, confusion matrices, ROC/AUC and interval (DeepROC) analysis."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from mrcgat.errors import DomainError

FPR_GROUPS = ((0.0, 1.0), (0.0, 0.33), (0.33, 0.67), (0.67, 1.0))


@dataclass(frozen=True)
class ScoredPrediction:
    subject_id: str
    true_class: int
    probs: np.ndarray

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))  # first maximum wins


@dataclass(frozen=True)
class RocCurve:
    """Empirical ROC polyline from (0, 0) to (1, 1).

    ``thresholds[i]`` is the score cut reached at point ``i``
    (``+inf`` for the origin).
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def area(self) -> float:
        return float(np.sum(np.diff(self.fpr) * (self.tpr[1:] + self.tpr[:-1]) / 2.0))


def _as_probs(predictions: Sequence[ScoredPrediction]) -> tuple[np.ndarray, np.ndarray]:
    if len(predictions) == 0:
        raise ValueError("no predictions")
    probs = np.vstack([p.probs for p in predictions])
    y = np.array([p.true_class for p in predictions], dtype=np.int64)
    return probs, y


def accuracy(predictions: Sequence[ScoredPrediction]) -> float:
    probs, y = _as_probs(predictions)
    return float(np.mean(np.argmax(probs, axis=1) == y))


def confusion_matrix(predictions: Sequence[ScoredPrediction], n_classes: int | None = None):
    """Rows are true classes, columns predictions; returns ``(counts, row_normalized)``."""
    probs, y = _as_probs(predictions)
    c = n_classes or probs.shape[1]
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (y, np.argmax(probs, axis=1)), 1)
    totals = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, totals, out=np.zeros((c, c)), where=totals > 0)
    return counts, normalized


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep from high to low; tied scores move diagonally in one step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUC is undefined unless both classes are present")
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(lab)[last]
    fp = np.cumsum(~lab)[last]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    thr = np.r_[np.inf, s[last]]
    # drop interior points that are collinear repeats of the same coordinate
    keep = np.r_[True, (np.diff(fpr) != 0) | (np.diff(tpr) != 0)]
    return RocCurve(fpr[keep], tpr[keep], thr[keep])


def roc_auc(scores, labels) -> tuple[RocCurve, float]:
    curve = roc_curve(scores, labels)
    return curve, curve.area()


def micro_auc(predictions: Sequence[ScoredPrediction]) -> float:
    """Pooled one-vs-rest AUC over every (subject, class) pair."""
    probs, y = _as_probs(predictions)
    onehot = np.zeros_like(probs, dtype=bool)
    onehot[np.arange(y.size), y] = True
    return roc_auc(probs.reshape(-1), onehot.reshape(-1))[1]


def per_class_auc(predictions: Sequence[ScoredPrediction]) -> list[float | None]:
    probs, y = _as_probs(predictions)
    out = []
    for c in range(probs.shape[1]):
        pos = y == c
        out.append(roc_auc(probs[:, c], pos)[1] if 0 < pos.sum() < y.size else None)
    return out


# -- interval analysis ----------------------------------------------------------

def _partial_polyline(curve: RocCurve, x1: float, x2: float):
    """Polyline portion with fpr in [x1, x2], entering at the lowest point on x1
    and leaving at the highest point on x2."""
    f, t = curve.fpr, curve.tpr
    i = int(np.searchsorted(f, x1, side="left"))
    if f[i] == x1:
        start = [(f[i], t[i])]
    else:
        y = t[i - 1] + (x1 - f[i - 1]) * (t[i] - t[i - 1]) / (f[i] - f[i - 1])
        start = [(x1, y)]
    j = int(np.searchsorted(f, x2, side="right")) - 1
    if f[j] == x2:
        end = [(f[j], t[j])]
        inner = range(i + (1 if f[i] == x1 else 0), j)
    else:
        y = t[j] + (x2 - f[j]) * (t[j + 1] - t[j]) / (f[j + 1] - f[j])
        end = [(x2, y)]
        inner = range(i + (1 if f[i] == x1 else 0), j + 1)
    pts = start + [(f[k], t[k]) for k in inner] + end
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


@dataclass(frozen=True)
class IntervalMetrics:
    fpr_range: tuple[float, float]
    tpr_range: tuple[float, float]
    partial_auc: float
    sens: float
    spec: float
    auc_ni: float

    def to_dict(self) -> dict:
        return {"fpr_range": list(self.fpr_range), "tpr_range": list(self.tpr_range),
                "partial_auc": self.partial_auc, "mean_sensitivity": self.sens,
                "mean_specificity": self.spec, "auc_ni": self.auc_ni}


def interval_metrics(curve: RocCurve, x1: float, x2: float) -> IntervalMetrics:
    """Mean sensitivity, mean specificity and normalized AUC over an FPR interval.

    Sensitivity averages the ROC height over ``[x1, x2]``; specificity
    averages ``1 - fpr`` over the TPR span the curve covers inside the
    interval. A flat span (no TPR change) uses the pointwise value
    ``1 - mean fpr``, or 0 when the curve has already reached TPR = 1.
    """
    if not 0.0 <= x1 < x2 <= 1.0:
        raise DomainError(f"invalid FPR interval [{x1}, {x2}]")
    xs, ys = _partial_polyline(curve, x1, x2)
    dx, dy = x2 - x1, float(ys[-1] - ys[0])
    area = float(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0))
    sens = area / dx
    if dy > 0:
        spec = float(np.sum(np.diff(ys) * (1.0 - (xs[1:] + xs[:-1]) / 2.0))) / dy
    elif ys[0] >= 1.0:
        spec = 0.0
    else:
        spec = 1.0 - (x1 + x2) / 2.0
    auc_ni = (dx * sens + dy * spec) / (dx + dy)
    return IntervalMetrics((x1, x2), (float(ys[0]), float(ys[-1])), area,
                           float(np.clip(sens, 0, 1)), float(np.clip(spec, 0, 1)),
                           float(np.clip(auc_ni, 0, 1)))


def deeproc_table(curve: RocCurve, groups=FPR_GROUPS) -> list[IntervalMetrics]:
    return [interval_metrics(curve, a, b) for a, b in groups]


# -- report -------------------------------------------------------------------

def pair_scores(probs: np.ndarray, y: np.ndarray, a: int, b: int):
    """Binary view of classes ``a`` (negative) vs ``b`` (positive)."""
    keep = (y == a) | (y == b)
    pa, pb = probs[keep, a], probs[keep, b]
    denom = pa + pb
    score = np.divide(pb, denom, out=np.full(pb.shape, 0.5), where=denom > 0)
    return score, y[keep] == b


def metrics_report(predictions: Sequence[ScoredPrediction], class_names: Sequence[str]) -> dict:
    probs, y = _as_probs(predictions)
    counts, normalized = confusion_matrix(predictions, len(class_names))
    report = {
        "n": int(y.size),
        "accuracy": accuracy(predictions),
        "class_names": list(class_names),
        "per_class_auc": dict(zip(class_names, per_class_auc(predictions))),
        "micro_auc": micro_auc(predictions) if len(set(y.tolist())) >= 2 else None,
        "confusion_counts": counts.tolist(),
        "confusion_normalized": normalized.tolist(),
        "deeproc": {},
    }
    for a, b in itertools.combinations(range(len(class_names)), 2):
        score, lab = pair_scores(probs, y, a, b)
        key = f"{class_names[a]}_vs_{class_names[b]}"
        if lab.size == 0 or lab.all() or not lab.any():
            report["deeproc"][key] = None
            continue
        curve, auc = roc_auc(score, lab)
        report["deeproc"][key] = {"auc": auc, "groups": [g.to_dict() for g in deeproc_table(curve)]}
    return report


def write_roc_csv(curve: RocCurve, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in zip(curve.fpr, curve.tpr, curve.thresholds):
            w.writerow([repr(float(f)), repr(float(t)), repr(float(th))])
