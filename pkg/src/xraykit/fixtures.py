"""Synthetic fixtures shaped like the CheXphoto files.

Nothing here touches real patient data. The generators reproduce the
published training-set label counts, a linearly separable feature set for
the classifier head, scores with known precision/recall, and a tiny
end-to-end demo tree (labels, PNGs, boxes, features, config).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SUBMISSION_LABELS
from ._util import round_half_away
from .boxes import BBox, ScoredBox, write_box_csv
from .features import write_features
from .imageops import RAW8, ImageBuffer, save_png
from .labels import LabelState, LabelTable, serialize_labels

N_TRAIN_IMAGES = 10507


@dataclass(frozen=True)
class Table1Row:
    name: str
    positive: int
    negative: int
    uncertain: int
    positive_pct: float
    negative_pct: float
    uncertain_pct: float

    @property
    def missing(self) -> int:
        return N_TRAIN_IMAGES - self.positive - self.negative - self.uncertain


# Training-set label distribution as published (counts and percentages).
TABLE1 = (
    Table1Row("Atelectasis", 1577, 7335, 1595, 15.01, 69.81, 15.18),
    Table1Row("Cardiomegaly", 1313, 8824, 370, 12.5, 83.98, 3.52),
    Table1Row("Consolidation", 671, 8521, 1315, 6.39, 81.1, 13.52),
    Table1Row("Edema", 2553, 7320, 634, 24.3, 69.67, 6.03),
    Table1Row("Pleural Effusion", 4115, 607, 607, 39.16, 5.81, 5.78),
)

# Test-set precision / recall / F1 as published.
TABLE5 = {
    "Atelectasis": (1.000, 0.795, 0.886),
    "Cardiomegaly": (0.999, 0.502, 0.668),
    "Consolidation": (1.000, 0.676, 0.807),
    "Edema": (1.000, 0.352, 0.521),
    "Pleural Effusion": (1.000, 0.441, 0.612),
}
TABLE5_MEAN = (1.000, 0.553, 0.6988)

# (TP, FN, FP) per label realizing the published precision/recall at threshold 0.5
TABLE5_COUNTS = {
    "Atelectasis": (795, 205, 0),
    "Cardiomegaly": (999, 991, 1),
    "Consolidation": (676, 324, 0),
    "Edema": (352, 648, 0),
    "Pleural Effusion": (441, 559, 0),
}


def table1_inconsistencies(tol: float = 0.01) -> list[tuple[str, str, float, float]]:
    """Cells whose published percentage disagrees with its own count.

    Returns ``(label, state, published, recomputed)`` tuples.
    """
    out = []
    for row in TABLE1:
        for state in ("positive", "negative", "uncertain"):
            published = getattr(row, f"{state}_pct")
            recomputed = round_half_away(100.0 * getattr(row, state) / N_TRAIN_IMAGES, 2)
            if abs(published - recomputed) > tol + 1e-9:
                out.append((row.name, state, published, recomputed))
    return out


def _chexphoto_path(i: int, split: str = "train", ext: str = "jpg") -> str:
    patient, study = divmod(i, 4)
    return f"CheXphoto-v1.0/{split}/patient{patient:05d}/study{study + 1}/view1_frontal.{ext}"


def table1_table(seed: int = 0) -> LabelTable:
    """10,507 records whose per-label state counts equal the published ones."""
    rng = np.random.default_rng(seed)
    states = np.empty((N_TRAIN_IMAGES, len(TABLE1)), dtype=np.int8)
    for j, row in enumerate(TABLE1):
        col = np.concatenate(
            [
                np.full(row.positive, LabelState.POSITIVE),
                np.full(row.negative, LabelState.NEGATIVE),
                np.full(row.uncertain, LabelState.UNCERTAIN),
                np.full(row.missing, LabelState.MISSING),
            ]
        )
        states[:, j] = rng.permutation(col)
    paths = tuple(_chexphoto_path(i) for i in range(N_TRAIN_IMAGES))
    return LabelTable(paths, states, tuple(r.name for r in TABLE1))


def table1_csv(seed: int = 0) -> str:
    return serialize_labels(table1_table(seed))


def table5_scores(seed: int = 0, n: int = 3000) -> tuple[np.ndarray, np.ndarray]:
    """(scores, labels) of shape (n, 5) whose confusion at threshold 0.5 gives TABLE5."""
    rng = np.random.default_rng(seed)
    S = np.empty((n, len(TABLE5_COUNTS)))
    Y = np.empty((n, len(TABLE5_COUNTS)), dtype=np.int64)
    for j, (tp, fn, fp) in enumerate(TABLE5_COUNTS.values()):
        tn = n - tp - fn - fp
        hi = lambda k: rng.uniform(0.5, 1.0, k)  # noqa: E731
        lo = lambda k: rng.uniform(0.0, 0.5, k)  # noqa: E731
        s = np.concatenate([hi(tp), lo(fn), hi(fp), lo(tn)])
        y = np.concatenate([np.ones(tp + fn, dtype=np.int64), np.zeros(fp + tn, dtype=np.int64)])
        perm = rng.permutation(n)
        S[:, j], Y[:, j] = s[perm], y[perm]
    return S, Y


def separable_features(
    n: int = 2000,
    dim: int = 1408,
    n_labels: int = 5,
    separation: float = 3.0,
    p_uncertain: float = 0.05,
    seed: int = 0,
):
    """Two Gaussian blobs per label along random near-orthogonal directions.

    Returns ``(X, target, mask)``; masked-out entries stand in for uncertain
    labels.
    """
    rng = np.random.default_rng(seed)
    Y = (rng.random((n, n_labels)) < rng.uniform(0.2, 0.5, n_labels)).astype(np.float64)
    U, _ = np.linalg.qr(rng.standard_normal((dim, n_labels)))
    X = rng.standard_normal((n, dim)) + (2.0 * Y - 1.0) * separation @ U.T
    mask = (rng.random((n, n_labels)) >= p_uncertain).astype(np.float64)
    return X, Y, mask


def states_from_targets(target: np.ndarray, mask: np.ndarray, seed: int = 0, p_missing: float = 0.2) -> np.ndarray:
    """LabelState codes consistent with ``(target, mask)``; some negatives become blanks."""
    rng = np.random.default_rng(seed)
    st = np.where(target > 0, LabelState.POSITIVE, LabelState.NEGATIVE).astype(np.int8)
    blank = (target == 0) & (rng.random(target.shape) < p_missing)
    st[blank] = LabelState.MISSING
    st[mask == 0] = LabelState.UNCERTAIN
    return st


def _radiograph_image(rng, width: int, height: int) -> tuple[np.ndarray, BBox]:
    img = rng.integers(0, 60, (height, width), dtype=np.uint8)
    w = int(rng.integers(width // 2, width - 2))
    h = int(rng.integers(height // 2, height - 2))
    x0 = int(rng.integers(0, width - w))
    y0 = int(rng.integers(0, height - h))
    img[y0 : y0 + h, x0 : x0 + w] = rng.integers(120, 256, (h, w), dtype=np.uint8)
    return img, BBox(float(x0), float(y0), float(x0 + w), float(y0 + h))


def write_demo(
    root,
    seed: int = 0,
    n_train: int = 240,
    n_test: int = 60,
    dim: int = 32,
    image_size: tuple[int, int] = (40, 32),
    drop_box: bool = True,
) -> Path:
    """Write a small self-consistent pipeline input tree; returns the config path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    X, Y, M = separable_features(n=n, dim=dim, separation=2.5, seed=seed)
    states = states_from_targets(Y, M, seed=seed + 1)

    train_paths = [_chexphoto_path(i, "train", "png") for i in range(n_train)]
    test_paths = [_chexphoto_path(i, "valid", "png") for i in range(n_test)]
    all_paths = train_paths + test_paths
    names = SUBMISSION_LABELS
    (root / "labels.csv").write_text(serialize_labels(LabelTable(tuple(train_paths), states[:n_train], names)))
    (root / "test_labels.csv").write_text(serialize_labels(LabelTable(tuple(test_paths), states[n_train:], names)))
    write_features(root / "features.bin", all_paths, X)

    gt, preds = [], []
    for k, p in enumerate(train_paths):
        img, box = _radiograph_image(rng, *image_size)
        out = root / "images" / p
        out.parent.mkdir(parents=True, exist_ok=True)
        save_png(ImageBuffer(img, RAW8), out)
        if drop_box and k == 0:
            continue
        gt.append((p, box))
        jitter = rng.uniform(-1.5, 1.5, 4)
        pb = BBox(
            box.x_min + jitter[0], box.y_min + jitter[1],
            max(box.x_max + jitter[2], box.x_min + jitter[0] + 1.0),
            max(box.y_max + jitter[3], box.y_min + jitter[1] + 1.0),
        )
        preds.append(ScoredBox(p, pb, float(rng.uniform(0.3, 1.0))))
    (root / "boxes.csv").write_text(write_box_csv(gt))
    (root / "predicted_boxes.csv").write_text(write_box_csv(preds))

    cfg = configparser.ConfigParser()
    cfg["paths"] = {
        "labels": "labels.csv",
        "test_labels": "test_labels.csv",
        "boxes": "boxes.csv",
        "images": "images",
        "features": "features.bin",
        "predicted_boxes": "predicted_boxes.csv",
        "output": "out",
    }
    cfg["run"] = {"seed": str(seed), "threshold_mode": "auto-youden", "iou_threshold": "0.5"}
    cfg["split"] = {"ratio": "0.8"}
    cfg["train"] = {"epochs": "6", "batch_size": "32", "n_hidden": "16", "lr0": "0.003"}
    # small output grid keeps the demo's prepared buffers to a few MB
    cfg["prepare"] = {"width": "64", "height": "64"}
    cfg["augment"] = {"rotation_lo": "-15", "rotation_hi": "15", "crop_fraction": "0.9"}
    path = root / "pipeline.ini"
    with open(path, "w") as fh:
        cfg.write(fh)
    return path
