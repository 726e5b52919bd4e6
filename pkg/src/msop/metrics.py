"""Classification and detection metrics, patient-grouped folds, fold summaries.

Sensitivity, specificity, and the binary accuracy treat malignant as the
positive class.  Detection follows the center rule: a predicted box is a true
positive iff its center falls inside a ground-truth box, an image with ground
truth but no predictions counts one false negative, and mIoU pairs every
prediction with its best-overlapping ground-truth box.  All reported values
are percentages; a metric whose conditioning class is absent is reported as
None, never as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .labels import LABELS, MALIGNANT, label_index
from .pipeline import BoundingBox


@dataclass
class EvalReport:
    accuracy: float
    acc2: float
    sensitivity: float | None
    specificity: float | None
    confusion: list[list[int]]        # rows: ground truth, cols: prediction
    n: int
    miou: float | None = None
    det_precision: float | None = None
    det_recall: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "acc2": self.acc2,
            "sensitivity": self.sensitivity, "specificity": self.specificity,
            "confusion": self.confusion, "n": self.n, "miou": self.miou,
            "det_precision": self.det_precision, "det_recall": self.det_recall,
            **({"extra": self.extra} if self.extra else {}),
        }

    METRIC_FIELDS = ("accuracy", "acc2", "sensitivity", "specificity",
                     "miou", "det_precision", "det_recall")


def classification_metrics(preds, gts) -> EvalReport:
    """Three-class accuracy plus the malignant-vs-rest binary metrics."""
    preds, gts = list(preds), list(gts)
    if not preds or len(preds) != len(gts):
        raise ValueError("preds and gts must be nonempty and of equal length")
    n = len(gts)
    confusion = [[0] * len(LABELS) for _ in LABELS]
    for p, g in zip(preds, gts):
        confusion[label_index(g)][label_index(p)] += 1

    correct = sum(confusion[i][i] for i in range(len(LABELS)))
    tp = sum(1 for p, g in zip(preds, gts) if g == MALIGNANT and p == MALIGNANT)
    fn = sum(1 for p, g in zip(preds, gts) if g == MALIGNANT and p != MALIGNANT)
    fp = sum(1 for p, g in zip(preds, gts) if g != MALIGNANT and p == MALIGNANT)
    tn = n - tp - fn - fp

    sensitivity = 100.0 * tp / (tp + fn) if tp + fn > 0 else None
    specificity = 100.0 * tn / (tn + fp) if tn + fp > 0 else None
    return EvalReport(
        accuracy=100.0 * correct / n,
        acc2=100.0 * (tp + tn) / n,
        sensitivity=sensitivity,
        specificity=specificity,
        confusion=confusion,
        n=n,
    )


def detection_metrics(pred_boxes: list[list[BoundingBox]],
                      gt_boxes: list[list[BoundingBox]]) -> tuple[float | None, float | None, float]:
    """(mIoU, precision, recall) as percentages over per-image box lists.

    Every image must have at least one ground-truth box.  A prediction whose
    center lies in any ground-truth box is a TP, otherwise an FP; an image
    with no predictions contributes one FN.  A ratio with an empty
    denominator is None, never 0.
    """
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError("need one prediction list per ground-truth list")
    tp = fp = fn = 0
    ious: list[float] = []
    for preds, gts in zip(pred_boxes, gt_boxes):
        if not gts:
            raise ValueError("every image must carry at least one ground-truth box")
        if not preds:
            fn += 1
            continue
        for box in preds:
            cx, cy = box.center
            if any(gt.contains_point(cx, cy) for gt in gts):
                tp += 1
            else:
                fp += 1
            ious.append(max(box.iou(gt) for gt in gts))
    miou = 100.0 * float(np.mean(ious)) if ious else None
    precision = 100.0 * tp / (tp + fp) if tp + fp > 0 else None
    recall = 100.0 * tp / (tp + fn) if tp + fn > 0 else None
    return miou, precision, recall


def patient_grouped_kfold(dataset, k: int, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """K (train, val) index splits that never separate a patient's images.

    Patients are shuffled by seed, then greedily dealt (largest first) to the
    fold with the fewest images, which keeps fold sizes balanced.  Validation
    folds partition the dataset exactly.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    by_patient: dict[str, list[int]] = {}
    for idx, rec in enumerate(dataset):
        by_patient.setdefault(rec.patient_id, []).append(idx)
    if len(by_patient) < k:
        raise ValueError(f"only {len(by_patient)} patients for {k} folds")

    rng = np.random.default_rng(seed)
    pids = list(by_patient)
    rng.shuffle(pids)
    pids.sort(key=lambda pid: -len(by_patient[pid]))  # stable: ties keep shuffle order

    fold_members: list[list[int]] = [[] for _ in range(k)]
    fold_sizes = [0] * k
    for pid in pids:
        target = min(range(k), key=lambda f: (fold_sizes[f], f))
        fold_members[target].extend(by_patient[pid])
        fold_sizes[target] += len(by_patient[pid])

    splits = []
    all_indices = set(range(len(dataset)))
    for members in fold_members:
        val = sorted(members)
        train = sorted(all_indices.difference(members))
        splits.append((train, val))
    return splits


def summarize_folds(reports: list[EvalReport]) -> dict[str, tuple[float, float]]:
    """Mean and population SD per metric across folds (None values skipped)."""
    if len(reports) < 2:
        raise ValueError("need at least two folds to summarize")
    summary: dict[str, tuple[float, float]] = {}
    for name in EvalReport.METRIC_FIELDS:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            continue
        mean = float(np.mean(values))
        sd = float(math.sqrt(np.mean([(v - mean) ** 2 for v in values])))
        summary[name] = (mean, sd)
    return summary


def format_fold_summary(summary: dict[str, tuple[float, float]]) -> str:
    lines = [f"{name}: {mean:.1f} ± {sd:.1f}" for name, (mean, sd) in summary.items()]
    return "\n".join(lines)
