"""Dice / IoU evaluation over label maps.

Counts are micro-averaged: per-class TP/FP/FN pixels accumulate over all
frames, scores are computed once at the end. Background (class 0) never
contributes to class scores. Classes absent from both predictions and
ground truth over the whole set are excluded from the means; a macro
(per-frame averaged) mode is available for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, ValidationError

CLASS_NAMES = {1: "SF", 2: "TS", 3: "IP", 4: "CR", 5: "OCR", 6: "OP"}


@dataclass
class ConfusionCounts:
    """Per-class pixel tallies, additive across frames and mergeable across shards."""

    num_classes: int = 6
    tp: np.ndarray = None
    fp: np.ndarray = None
    fn: np.ndarray = None
    frames: int = 0

    def __post_init__(self):
        if self.tp is None:
            self.tp = np.zeros(self.num_classes, dtype=np.int64)
        if self.fp is None:
            self.fp = np.zeros(self.num_classes, dtype=np.int64)
        if self.fn is None:
            self.fn = np.zeros(self.num_classes, dtype=np.int64)

    def accumulate(
        self,
        pred_label: np.ndarray,
        gt_label: np.ndarray,
        classes: Optional[Sequence[int]] = None,
    ) -> "ConfusionCounts":
        """Add one frame's pixel comparison; restrict to ``classes`` when given."""
        if pred_label.shape != gt_label.shape:
            raise DimensionError(
                f"prediction shape {pred_label.shape} does not match ground truth {gt_label.shape}"
            )
        wanted = range(1, self.num_classes + 1) if classes is None else classes
        for c in wanted:
            pred_c = pred_label == c
            gt_c = gt_label == c
            self.tp[c - 1] += int(np.logical_and(pred_c, gt_c).sum())
            self.fp[c - 1] += int(np.logical_and(pred_c, ~gt_c).sum())
            self.fn[c - 1] += int(np.logical_and(~pred_c, gt_c).sum())
        self.frames += 1
        return self

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        """Sum of two independently accumulated shards (associative, commutative)."""
        if self.num_classes != other.num_classes:
            raise DimensionError("cannot merge counts with different class counts")
        return ConfusionCounts(
            num_classes=self.num_classes,
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            frames=self.frames + other.frames,
        )

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return self.merge(other)


@dataclass(frozen=True)
class ClassScores:
    """Per-class scores (None for excluded classes) and their unweighted mean."""

    per_class: Dict[int, Optional[float]]
    mean: float


def _scores(counts: ConfusionCounts, kind: str) -> ClassScores:
    per_class: Dict[int, Optional[float]] = {}
    included = []
    for c in range(1, counts.num_classes + 1):
        tp = int(counts.tp[c - 1])
        fp = int(counts.fp[c - 1])
        fn = int(counts.fn[c - 1])
        if tp + fp + fn == 0:
            per_class[c] = None
            continue
        if kind == "dice":
            score = 2 * tp / (2 * tp + fp + fn)
        else:
            score = tp / (tp + fp + fn)
        per_class[c] = score
        included.append(score)
    if not included:
        raise ValidationError("every class is absent from both prediction and ground truth; mean undefined")
    return ClassScores(per_class=per_class, mean=sum(included) / len(included))


def dice_scores(counts: ConfusionCounts) -> ClassScores:
    """Dice_c = 2*TP / (2*TP + FP + FN) per class plus unweighted mean."""
    return _scores(counts, "dice")


def iou_scores(counts: ConfusionCounts) -> ClassScores:
    """IoU_c = TP / (TP + FP + FN) per class plus unweighted mean."""
    return _scores(counts, "iou")


class MacroAverager:
    """Per-frame score averaging, kept behind a flag for comparison with micro counts."""

    def __init__(self, num_classes: int = 6):
        self.num_classes = num_classes
        self._dice_sums = np.zeros(num_classes)
        self._dice_counts = np.zeros(num_classes, dtype=np.int64)

    def add(self, pred_label: np.ndarray, gt_label: np.ndarray):
        frame = ConfusionCounts(self.num_classes).accumulate(pred_label, gt_label)
        for c in range(1, self.num_classes + 1):
            tp, fp, fn = int(frame.tp[c - 1]), int(frame.fp[c - 1]), int(frame.fn[c - 1])
            if tp + fp + fn == 0:
                continue
            self._dice_sums[c - 1] += 2 * tp / (2 * tp + fp + fn)
            self._dice_counts[c - 1] += 1

    def dice(self) -> ClassScores:
        per_class: Dict[int, Optional[float]] = {}
        included = []
        for c in range(1, self.num_classes + 1):
            if self._dice_counts[c - 1] == 0:
                per_class[c] = None
                continue
            score = float(self._dice_sums[c - 1] / self._dice_counts[c - 1])
            per_class[c] = score
            included.append(score)
        if not included:
            raise ValidationError("every class is absent in every frame; mean undefined")
        return ClassScores(per_class=per_class, mean=sum(included) / len(included))


def metrics_report(counts: ConfusionCounts, fps: Optional[float] = None) -> dict:
    """JSON-ready report: per-class Dice, mean Dice, per-class IoU, mIoU, frame count."""
    dice = dice_scores(counts)
    iou = iou_scores(counts)
    report = {
        "mean_dice": dice.mean,
        "miou": iou.mean,
        "dice": {CLASS_NAMES[c]: dice.per_class[c] for c in sorted(dice.per_class)},
        "iou": {CLASS_NAMES[c]: iou.per_class[c] for c in sorted(iou.per_class)},
        "frames": counts.frames,
    }
    if fps is not None:
        report["fps"] = fps
    return report


def format_table(report: dict) -> str:
    """Plain-text table mirroring the per-class Dice column order."""
    columns = ["Mean"] + [CLASS_NAMES[c] for c in sorted(CLASS_NAMES)]
    values = [report["mean_dice"]] + [report["dice"][CLASS_NAMES[c]] for c in sorted(CLASS_NAMES)]
    cells = ["  -  " if v is None else f"{v:.4f}" for v in values]
    lines = [
        "mIoU   | Dice " + " | ".join(f"{c:>6}" for c in columns),
        f"{report['miou']:.4f} |      " + " | ".join(f"{c:>6}" for c in cells),
        f"frames: {report['frames']}",
    ]
    if "fps" in report:
        lines.append(f"throughput: {report['fps']:.2f} frames/s")
    return "\n".join(lines) + "\n"
