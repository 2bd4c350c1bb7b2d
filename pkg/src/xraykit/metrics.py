"""ROC/AUC, Youden thresholds and the per-label precision/recall/F1 report.

The decision rule everywhere is ``score >= threshold``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._util import canonical_json, fmt_fixed


class DegenerateLabels(ValueError):
    pass


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    """Operating points by descending threshold; the first point is the (+inf, 0, 0) sentinel."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / self.n_pos

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / self.n_neg

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.tpr.tolist(), self.fpr.tolist()))


def _arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be binary (0/1)")
    return s, y.astype(np.int64)


def roc_curve(scores, labels) -> RocCurve:
    s, y = _arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of each run of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return RocCurve(
        thresholds=np.r_[np.inf, s[last]],
        tp=np.r_[0, tp[last]],
        fp=np.r_[0, fp[last]],
        n_pos=n_pos,
        n_neg=n_neg,
    )


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve, summed exactly in integer counts."""
    tp = curve.tp.astype(object)
    fp = curve.fp.astype(object)
    twice_area = sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1]))
    return float(Fraction(int(twice_area), 2 * curve.n_pos * curve.n_neg))


def roc_auc(scores, labels) -> float:
    return auc(roc_curve(scores, labels))


def youden_threshold(curve: RocCurve) -> tuple[float, float]:
    """Threshold maximizing TPR - FPR over the observed scores.

    Ties go to the lowest FPR, then the highest threshold. The +inf sentinel
    is not a candidate.
    """
    best_key, best_i = None, None
    for i in range(1, len(curve.thresholds)):
        j = Fraction(int(curve.tp[i]), curve.n_pos) - Fraction(int(curve.fp[i]), curve.n_neg)
        key = (j, -int(curve.fp[i]), curve.thresholds[i])
        if best_key is None or key > best_key:
            best_key, best_i = key, i
    return float(curve.thresholds[best_i]), float(best_key[0])


def confusion(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    s, y = _arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return tp, fp, tn, fn


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def prf1(tp: float, fp: float, tn: float, fn: float) -> tuple[float, float, float]:
    """Precision, recall, F1; any empty denominator gives 0."""
    if min(tp, fp, tn, fn) < 0:
        raise ValueError("confusion counts must be non-negative")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    return precision, recall, f1_from(precision, recall)


def f1_from(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


@dataclass
class LabelMetrics:
    name: str
    auc: float | None
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float


@dataclass
class MetricsReport:
    rows: list[LabelMetrics]
    mean_auc: float | None = field(init=False)
    mean_precision: float = field(init=False)
    mean_recall: float = field(init=False)
    mean_f1: float = field(init=False)

    def __post_init__(self):
        if not self.rows:
            raise EmptyInput("report needs at least one label")
        aucs = [r.auc for r in self.rows if r.auc is not None]
        self.mean_auc = math.fsum(aucs) / len(aucs) if aucs else None
        n = len(self.rows)
        self.mean_precision = math.fsum(r.precision for r in self.rows) / n
        self.mean_recall = math.fsum(r.recall for r in self.rows) / n
        self.mean_f1 = math.fsum(r.f1 for r in self.rows) / n

    @property
    def thresholds(self) -> dict[str, float]:
        return {r.name: r.threshold for r in self.rows}

    def to_json(self) -> dict:
        return {
            "labels": [vars(r).copy() for r in self.rows],
            "mean": {
                "auc": self.mean_auc,
                "precision": self.mean_precision,
                "recall": self.mean_recall,
                "f1": self.mean_f1,
            },
        }

    def render(self) -> str:
        """Fixed-width text table, values rounded half away from zero to 3 places."""
        head = ("Label", "AUC", "Threshold", "Precision", "Recall", "F1 score")
        lines = []

        def cell(v):
            return "-" if v is None else fmt_fixed(v, 3)

        body = [
            (r.name, cell(r.auc), cell(r.threshold), cell(r.precision), cell(r.recall), cell(r.f1))
            for r in self.rows
        ]
        body.append(
            ("Mean value", cell(self.mean_auc), "", cell(self.mean_precision), cell(self.mean_recall), cell(self.mean_f1))
        )
        widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
        for row in [head, *body]:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        return "\n".join(lines) + "\n"


def label_metrics(name: str, scores, labels, threshold: float | None = None) -> LabelMetrics:
    """Metrics for one label; ``threshold=None`` tunes it by Youden's index."""
    s, y = _arrays(scores, labels)
    try:
        curve = roc_curve(s, y)
    except DegenerateLabels:
        curve = None
        warnings.warn(f"{name}: only one class present, AUC left out of the mean", stacklevel=2)
    if threshold is None:
        if curve is None:
            warnings.warn(f"{name}: cannot tune a threshold without both classes, using 0.5", stacklevel=2)
            threshold = 0.5
        else:
            threshold, _ = youden_threshold(curve)
    tp, fp, tn, fn = confusion(s, y, threshold)
    p, r, f = prf1(tp, fp, tn, fn)
    return LabelMetrics(name, None if curve is None else auc(curve), float(threshold), tp, fp, tn, fn, p, r, f)


def build_report(
    scores,
    labels,
    names: Sequence[str],
    thresholds: Mapping[str, float] | float | None = None,
    mask=None,
) -> MetricsReport:
    """Per-label report over (n_samples, n_labels) arrays.

    ``thresholds`` may be a mapping per label, a single float for all labels,
    or None to tune each label by Youden's index. ``mask`` (same shape) drops
    entries with value 0, e.g. uncertain labels.
    """
    S = np.asarray(scores, dtype=np.float64)
    Y = np.asarray(labels)
    if S.size == 0:
        raise EmptyInput("no scores")
    if S.ndim == 1:
        S, Y = S[:, None], Y[:, None]
    if S.shape != Y.shape or S.shape[1] != len(names):
        raise ValueError(f"scores {S.shape}, labels {Y.shape} and {len(names)} names disagree")
    M = np.ones(S.shape, dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    rows = []
    for j, name in enumerate(names):
        keep = M[:, j]
        if isinstance(thresholds, Mapping):
            t = thresholds[name]
        else:
            t = thresholds
        rows.append(label_metrics(name, S[keep, j], Y[keep, j], t))
    return MetricsReport(rows)


def save_thresholds(thresholds: Mapping[str, float], path) -> None:
    Path(path).write_text(canonical_json({k: float(v) for k, v in thresholds.items()}), encoding="utf-8")


def load_thresholds(path) -> dict[str, float]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError("threshold file must hold a JSON object")
    out = {}
    for k, v in obj.items():
        v = float(v)
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"threshold for {k!r} outside [0, 1]: {v}")
        out[str(k)] = v
    return out
