"""Smartphone chest-radiograph pipeline: labels, boxes, image ops, classifier head, metrics."""

__version__ = "0.1.0"

SUBMISSION_LABELS = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Pleural Effusion",
)
