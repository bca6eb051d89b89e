"""Classification and detection metrics, COCO-style mAP, and the composite
fitness values used for early stopping and hyperparameter evolution.

The positive class is Distended throughout. Images where the detector found
nothing count as IoU 0 and predicted label NonDistended.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import BBox, Label, LabeledBox, iou


class LengthMismatch(Exception):
    pass


class UndefinedMetric(Exception):
    pass


class EmptySet(Exception):
    pass


MAP_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be >= 0")

    def to_json_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass
class PerImageResult:
    image_id: str
    predicted_label: Label
    confidence: float
    predicted_box: BBox | None
    iou: float


@dataclass
class EvalReport:
    balanced_accuracy: float
    sensitivity: float
    specificity: float
    mean_iou: float
    frac_iou_ge_05: float
    map50: float
    map5095: float
    confusion: ConfusionMatrix
    per_image: list[PerImageResult]

    def to_json_dict(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "mean_iou": self.mean_iou,
            "frac_iou_ge_05": self.frac_iou_ge_05,
            "map50": self.map50,
            "map5095": self.map5095,
            "confusion": self.confusion.to_json_dict(),
            "per_image": [
                {
                    "image_id": r.image_id,
                    "predicted_label": r.predicted_label.value,
                    "confidence": r.confidence,
                    "predicted_box": None if r.predicted_box is None else r.predicted_box.to_list(),
                    "iou": r.iou,
                }
                for r in self.per_image
            ],
        }


def confusion(preds, gts) -> ConfusionMatrix:
    """Count TP/TN/FP/FN with Distended as the positive class."""
    if len(preds) != len(gts):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    tp = tn = fp = fn = 0
    for p, g in zip(preds, gts):
        if g is Label.DISTENDED:
            if p is Label.DISTENDED:
                tp += 1
            else:
                fn += 1
        else:
            if p is Label.DISTENDED:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def classification_metrics(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(sensitivity, specificity, balanced accuracy)."""
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise UndefinedMetric("both classes must be present in the ground truth")
    sensitivity = cm.tp / (cm.tp + cm.fn)
    specificity = cm.tn / (cm.tn + cm.fp)
    return sensitivity, specificity, (sensitivity + specificity) / 2.0


def detection_metrics(pairs) -> tuple[float, float]:
    """(mean IoU, fraction with IoU >= 0.5) over (predicted, gt) box pairs.

    A missing prediction (None) contributes IoU 0.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptySet("no images to evaluate")
    ious = [0.0 if pred is None else iou(pred, gt) for pred, gt in pairs]
    return float(np.mean(ious)), float(np.mean([v >= 0.5 for v in ious]))


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolated AP with the precision envelope."""
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recalls >= r - 1e-12
        ap += precisions[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _single_class_ap(dets, gts: dict, iou_threshold: float) -> float:
    """AP for one class; each image has at most one gt of this class."""
    n_gt = len(gts)
    if n_gt == 0:
        raise EmptySet("no ground truths for this class")
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1].confidence)
    matched: set = set()
    tps = np.zeros(len(dets))
    for rank, i in enumerate(order):
        image_id, det = dets[i]
        gt = gts.get(image_id)
        if gt is None or image_id in matched:
            continue
        if iou(det.box, gt.box) >= iou_threshold:
            tps[rank] = 1.0
            matched.add(image_id)
    if len(dets) == 0:
        return 0.0
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(1.0 - tps)
    recalls = tp_cum / n_gt
    precisions = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    return _interpolated_ap(recalls, precisions)


def average_precision(detections, gts: dict, iou_threshold: float) -> float:
    """mAP at one IoU threshold.

    `detections`: iterable of (image_id, LabeledBox); `gts`: image_id ->
    LabeledBox (exactly one per image). A detection is a TP when its image's
    gt is unmatched, the IoU clears the threshold, and the class matches;
    per-class APs are averaged over the classes present in the ground truth.
    """
    gt_classes = sorted({gt.label.value for gt in gts.values()})
    aps = []
    for cls_value in gt_classes:
        cls_gts = {k: v for k, v in gts.items() if v.label.value == cls_value}
        cls_dets = [(i, d) for i, d in detections if d.label.value == cls_value]
        aps.append(_single_class_ap(cls_dets, cls_gts, iou_threshold))
    if not aps:
        raise EmptySet("no ground-truth classes")
    return float(np.mean(aps))


def map_range(detections, gts: dict) -> tuple[float, float]:
    """(mAP@0.5, mean of mAP over thresholds 0.50, 0.55, ..., 0.95)."""
    values = [average_precision(detections, gts, t) for t in MAP_THRESHOLDS]
    return values[0], float(np.mean(values))


def detection_fitness(map50: float, map5095: float) -> float:
    """Early-stop/evolution fitness of the detection mode."""
    return 0.1 * map50 + 0.9 * map5095


def multitask_fitness(balanced_accuracy: float, map50: float) -> float:
    """Early-stop/evolution fitness of the multi-task mode."""
    return 0.7 * balanced_accuracy + 0.3 * map50
