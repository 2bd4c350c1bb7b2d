"""Axis-aligned box geometry, annotator agreement and single-class AP."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from ._util import is_finite


class InvalidBox(ValueError):
    pass


class NoCommonImages(ValueError):
    pass


class EmptyGroundTruth(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not is_finite(self.x_min, self.y_min, self.x_max, self.y_max):
            raise InvalidBox(f"non-finite coordinates in {self}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBox(f"box must have positive width and height: {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scale(self, s: float) -> "BBox":
        return BBox(self.x_min * s, self.y_min * s, self.x_max * s, self.y_max * s)


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    box: BBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def _check(*boxes) -> None:
    for b in boxes:
        if not isinstance(b, BBox):
            raise InvalidBox(f"expected BBox, got {type(b).__name__}")


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def _union_is_rectangle(a: BBox, b: BBox) -> bool:
    # Union of two rectangles is itself a rectangle iff one contains the other,
    # or they share an extent on one axis and touch/overlap on the other.
    def contains(p: BBox, q: BBox) -> bool:
        return p.x_min <= q.x_min and p.y_min <= q.y_min and p.x_max >= q.x_max and p.y_max >= q.y_max

    if contains(a, b) or contains(b, a):
        return True
    same_x = a.x_min == b.x_min and a.x_max == b.x_max
    same_y = a.y_min == b.y_min and a.y_max == b.y_max
    if same_x and a.y_min <= b.y_max and b.y_min <= a.y_max:
        return True
    if same_y and a.x_min <= b.x_max and b.x_min <= a.x_max:
        return True
    return False


def iou(a: BBox, b: BBox) -> float:
    _check(a, b)
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    return inter / union


def giou(a: BBox, b: BBox) -> float:
    """IoU minus the share of the smallest enclosing box not covered by the union."""
    _check(a, b)
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    value = inter / union
    if _union_is_rectangle(a, b):
        return value
    enclose = (max(a.x_max, b.x_max) - min(a.x_min, b.x_min)) * (
        max(a.y_max, b.y_max) - min(a.y_min, b.y_min)
    )
    # rounding can push enclose just below union on near-rectangular unions
    return value - max(enclose - union, 0.0) / enclose


def giou_loss(a: BBox, b: BBox) -> float:
    return 1.0 - giou(a, b)


@dataclass
class AgreementReport:
    n_pairs: int
    mean_iou: float
    agree_fraction: float
    iou_threshold: float
    unmatched_first: list[str] = field(default_factory=list)
    unmatched_second: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "n_pairs": self.n_pairs,
            "mean_iou": self.mean_iou,
            "agree_fraction": self.agree_fraction,
            "iou_threshold": self.iou_threshold,
            "unmatched_first": list(self.unmatched_first),
            "unmatched_second": list(self.unmatched_second),
        }


def _group(items: Iterable[tuple[str, BBox]]) -> dict[str, list[BBox]]:
    out: dict[str, list[BBox]] = {}
    for image_id, box in items:
        out.setdefault(image_id, []).append(box)
    return out


def _greedy_pairs(first: list[BBox], second: list[BBox]) -> list[float]:
    """Match boxes of one image greedily by descending IoU; return matched IoUs."""
    cands = sorted(
        ((iou(a, b), i, j) for i, a in enumerate(first) for j, b in enumerate(second)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_i, used_j, out = set(), set(), []
    for v, i, j in cands:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        out.append(v)
    return out


def annotation_agreement(
    first: Sequence[tuple[str, BBox]],
    second: Sequence[tuple[str, BBox]],
    iou_threshold: float = 0.5,
) -> AgreementReport:
    """Compare two annotators' boxes, image by image."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    ga, gb = _group(first), _group(second)
    common = [k for k in ga if k in gb]
    if not common:
        raise NoCommonImages("the two annotation sets share no image ids")
    ious: list[float] = []
    for k in common:
        ious.extend(_greedy_pairs(ga[k], gb[k]))
    n = len(ious)
    return AgreementReport(
        n_pairs=n,
        mean_iou=math.fsum(ious) / n,
        agree_fraction=sum(v >= iou_threshold for v in ious) / n,
        iou_threshold=iou_threshold,
        unmatched_first=sorted(k for k in ga if k not in gb),
        unmatched_second=sorted(k for k in gb if k not in ga),
    )


def match_detections(
    predictions: Sequence[ScoredBox],
    ground_truth: Sequence[tuple[str, BBox]],
    iou_threshold: float = 0.5,
) -> list[bool]:
    """True/false-positive flag per prediction, in descending-score order.

    Predictions are visited highest score first (stable for ties); each one
    takes the still-unmatched ground truth of its image with the highest IoU,
    provided that IoU reaches the threshold.
    """
    gt = _group(ground_truth)
    taken = {k: [False] * len(v) for k, v in gt.items()}
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    flags = []
    for i in order:
        p = predictions[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gt.get(p.image_id, ())):
            if taken[p.image_id][j]:
                continue
            v = iou(p.box, g)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            taken[p.image_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall_points(flags: Sequence[bool], n_gt: int) -> list[tuple[Fraction, Fraction]]:
    tp = fp = 0
    out = []
    for hit in flags:
        if hit:
            tp += 1
        else:
            fp += 1
        out.append((Fraction(tp, tp + fp), Fraction(tp, n_gt)))
    return out


def average_precision(
    predictions: Sequence[ScoredBox],
    ground_truth: Sequence[tuple[str, BBox]],
    iou_threshold: float = 0.5,
) -> float:
    """All-point interpolated AP, accumulated in exact rational arithmetic."""
    n_gt = len(ground_truth)
    if n_gt == 0:
        raise EmptyGroundTruth("no ground-truth boxes")
    points = precision_recall_points(match_detections(predictions, ground_truth, iou_threshold), n_gt)
    if not points:
        return 0.0
    # precision envelope: running max from the right
    env = [p for p, _ in points]
    for k in range(len(env) - 2, -1, -1):
        env[k] = max(env[k], env[k + 1])
    ap = Fraction(0)
    prev_r = Fraction(0)
    for (_, r), p in zip(points, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def read_box_csv(text: str, with_score: bool | None = None):
    """Parse ``image_path,x_min,y_min,x_max,y_max[,score]``.

    Returns ScoredBox objects when a score column is present, else
    ``(image_path, BBox)`` pairs.
    """
    reader = csv.DictReader(io.StringIO(text))
    cols = [c.strip() for c in (reader.fieldnames or [])]
    need = ["image_path", "x_min", "y_min", "x_max", "y_max"]
    missing = [c for c in need if c not in cols]
    if missing:
        raise ValueError(f"box CSV missing columns: {missing}")
    has_score = "score" in cols if with_score is None else with_score
    out = []
    for rownum, row in enumerate(reader, start=2):
        row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
        try:
            box = BBox(*(float(row[c]) for c in need[1:]))
        except (InvalidBox, ValueError) as exc:
            raise InvalidBox(f"row {rownum}: {exc}") from None
        if has_score:
            out.append(ScoredBox(row["image_path"], box, float(row["score"])))
        else:
            out.append((row["image_path"], box))
    return out


def _coords(b: BBox) -> list[str]:
    return [repr(float(v)) for v in (b.x_min, b.y_min, b.x_max, b.y_max)]


def write_box_csv(items) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    scored = bool(items) and isinstance(items[0], ScoredBox)
    w.writerow(["image_path", "x_min", "y_min", "x_max", "y_max"] + (["score"] if scored else []))
    for it in items:
        if scored:
            b = it.box
            w.writerow([it.image_id, *_coords(b), repr(float(it.score))])
        else:
            image_id, b = it
            w.writerow([image_id, *_coords(b)])
    return buf.getvalue()
