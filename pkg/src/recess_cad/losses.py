"""Training losses: CIoU box loss, BCE objectness/class losses, the
imbalance-weighted classification loss, and the weighted-sum totals for the
two operating modes.

All tensor paths keep full gradient flow (including the CIoU aspect-ratio
coupling), so analytic gradients match finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .imaging import BBox, Label
from .model import DetectionTargets, ModeError, ModelConfig

PROB_EPS = 1e-7  # probability clamp; keeps BCE finite
_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Term weights: alpha*L_box + beta*L_obj + gamma*L_c + delta*L_cls."""

    alpha: float
    beta: float
    gamma: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values; l_c is 0 in multi-task mode, l_cls is 0 in detection mode."""

    l_box: float
    l_obj: float
    l_c: float
    l_cls: float
    total: float

    def detach(self) -> "LossBreakdown":
        return LossBreakdown(
            float(self.l_box), float(self.l_obj), float(self.l_c),
            float(self.l_cls), float(self.total),
        )

    def to_json_dict(self) -> dict:
        d = self.detach()
        return {"l_box": d.l_box, "l_obj": d.l_obj, "l_c": d.l_c,
                "l_cls": d.l_cls, "total": d.total}


def _ciou_tensor(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """CIoU loss over (..., 4) xyxy boxes: 1 - IoU + rho^2/c^2 + a*v."""
    px0, py0, px1, py1 = pred.unbind(-1)
    gx0, gy0, gx1, gy1 = gt.unbind(-1)
    pw, ph = px1 - px0, py1 - py0
    gw, gh = gx1 - gx0, gy1 - gy0

    inter_w = (torch.minimum(px1, gx1) - torch.maximum(px0, gx0)).clamp(min=0)
    inter_h = (torch.minimum(py1, gy1) - torch.maximum(py0, gy0)).clamp(min=0)
    inter = inter_w * inter_h
    union = pw * ph + gw * gh - inter  # > 0 for valid boxes
    iou = inter / union

    # squared center distance over squared enclosing-box diagonal
    rho2 = ((px0 + px1) - (gx0 + gx1)) ** 2 / 4 + ((py0 + py1) - (gy0 + gy1)) ** 2 / 4
    cw = torch.maximum(px1, gx1) - torch.minimum(px0, gx0)
    ch = torch.maximum(py1, gy1) - torch.minimum(py0, gy0)
    c2 = cw**2 + ch**2

    v = (4 / math.pi**2) * (torch.atan(gw / (gh + _EPS)) - torch.atan(pw / (ph + _EPS))) ** 2
    a = v / ((1 - iou) + v + _EPS)
    return 1 - iou + rho2 / c2 + a * v


def ciou_loss(pred: BBox, gt: BBox) -> float:
    """Scalar CIoU loss between two boxes; 0 iff the boxes are identical."""
    p = torch.tensor(pred.to_list(), dtype=torch.float64)
    g = torch.tensor(gt.to_list(), dtype=torch.float64)
    return float(_ciou_tensor(p, g))


def _bce_tensor(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))


def bce(p: float, y: int) -> float:
    """Binary cross-entropy with the standard probability clamp."""
    pc = min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)
    return -(y * math.log(pc) + (1 - y) * math.log(1.0 - pc))


class BatchTargets:
    """Stacked per-image targets plus index tensors for the positive anchors."""

    def __init__(self, targets: list[DetectionTargets]):
        self.obj = torch.from_numpy(np.stack([t.obj for t in targets]))
        self.gt_boxes = torch.from_numpy(np.stack([t.gt_box for t in targets]).astype(np.float32))
        pos = np.array([t.pos for t in targets])
        self.pos_rows = torch.from_numpy(pos[:, 0])
        self.pos_cols = torch.from_numpy(pos[:, 1])
        self.pos_anchors = torch.from_numpy(pos[:, 2])
        self.cls_index = torch.from_numpy(np.array([t.cls_index for t in targets]))
        self.n = len(targets)

    def to(self, dtype: torch.dtype) -> "BatchTargets":
        self.obj = self.obj.to(dtype)
        self.gt_boxes = self.gt_boxes.to(dtype)
        return self


def _decode_positive_boxes(
    raw: torch.Tensor, targets: BatchTargets, config: ModelConfig
) -> torch.Tensor:
    """Differentiable decode of the predicted box at each image's positive anchor."""
    idx = torch.arange(targets.n)
    t = raw[idx, targets.pos_rows, targets.pos_cols, targets.pos_anchors]  # (B, 5+C)
    stride = float(config.stride)
    priors = torch.tensor(config.anchor_priors, dtype=raw.dtype)
    pw = priors[targets.pos_anchors, 0]
    ph = priors[targets.pos_anchors, 1]
    cx = (targets.pos_cols.to(raw.dtype) + torch.sigmoid(t[:, 0])) * stride
    cy = (targets.pos_rows.to(raw.dtype) + torch.sigmoid(t[:, 1])) * stride
    w = pw * torch.exp(t[:, 2].clamp(-30, 30))
    h = ph * torch.exp(t[:, 3].clamp(-30, 30))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def detection_loss(
    raw: torch.Tensor, targets: BatchTargets, w: LossWeights, config: ModelConfig
) -> LossBreakdown:
    """Two-class detection loss: alpha*L_box + beta*L_obj + gamma*L_c.

    L_box is the mean CIoU over positive anchors, L_obj the mean BCE of
    objectness over all anchors, L_c the mean BCE of the softmax class
    outputs at positive anchors.
    """
    if config.num_classes != 2:
        raise ModeError("detection_loss requires the two-class detection mode")
    pred_boxes = _decode_positive_boxes(raw, targets, config)
    gt = targets.gt_boxes.to(raw.dtype)
    l_box = _ciou_tensor(pred_boxes, gt).mean()

    obj_p = torch.sigmoid(raw[..., 4])
    l_obj = _bce_tensor(obj_p, targets.obj.to(raw.dtype)).mean()

    idx = torch.arange(targets.n)
    cls_logits = raw[idx, targets.pos_rows, targets.pos_cols, targets.pos_anchors][:, 5:]
    cls_probs = torch.softmax(cls_logits, dim=-1)
    onehot = torch.zeros_like(cls_probs)
    onehot[idx, targets.cls_index] = 1.0
    l_c = _bce_tensor(cls_probs, onehot).mean()

    total = w.alpha * l_box + w.beta * l_obj + w.gamma * l_c
    zero = torch.zeros((), dtype=raw.dtype)
    return LossBreakdown(l_box=l_box, l_obj=l_obj, l_c=l_c, l_cls=zero, total=total)


def weighted_cls_loss(p_distended, label: Label, w_pos: float):
    """BCE on the Distended probability, scaled by w_pos for Distended truths."""
    y = 1 if label is Label.DISTENDED else 0
    weight = w_pos if y == 1 else 1.0
    if isinstance(p_distended, torch.Tensor):
        yt = torch.as_tensor(float(y), dtype=p_distended.dtype)
        return weight * _bce_tensor(p_distended, yt)
    return weight * bce(p_distended, y)


def multitask_loss(
    raw: torch.Tensor,
    cls_probs: torch.Tensor,
    targets: BatchTargets,
    labels: list[Label],
    w: LossWeights,
    w_pos: float,
    config: ModelConfig,
) -> LossBreakdown:
    """Multi-task loss: alpha*L_box + beta*L_obj + delta*L_cls; L_c is always 0.

    L_cls is the imbalance-weighted BCE of the classifier's Distended
    probability, averaged over the batch.
    """
    if config.num_classes != 1:
        raise ModeError("multitask_loss requires the single-class multi-task mode")
    pred_boxes = _decode_positive_boxes(raw, targets, config)
    l_box = _ciou_tensor(pred_boxes, targets.gt_boxes.to(raw.dtype)).mean()
    obj_p = torch.sigmoid(raw[..., 4])
    l_obj = _bce_tensor(obj_p, targets.obj.to(raw.dtype)).mean()

    terms = [weighted_cls_loss(cls_probs[i, 1], labels[i], w_pos) for i in range(len(labels))]
    l_cls = torch.stack(terms).mean()

    total = w.alpha * l_box + w.beta * l_obj + w.delta * l_cls
    zero = torch.zeros((), dtype=raw.dtype)
    return LossBreakdown(l_box=l_box, l_obj=l_obj, l_c=zero, l_cls=l_cls, total=total)
