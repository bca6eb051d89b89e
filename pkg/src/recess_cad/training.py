"""Training loop (SGD with momentum), composite-fitness early stopping, and
the patient-grouped cross-validation driver.

A single training run is single-writer over the model; distinct folds are
independent. Validation fitness is the mode's composite: detection uses
0.1*mAP@0.5 + 0.9*mAP@0.5:0.95, multi-task uses 0.7*BA + 0.3*mAP@0.5.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .dataset import DatasetManifest, FoldSplit, class_weight, grouped_kfold, train_val_split
from .imaging import BBox, Label, load_png
from .losses import BatchTargets, LossBreakdown, LossWeights, detection_loss, multitask_loss
from .metrics import (
    EvalReport,
    PerImageResult,
    confusion,
    classification_metrics,
    detection_fitness,
    detection_metrics,
    map_range,
    multitask_fitness,
)
from .model import (
    DetectionTargets,
    Mode,
    ModelConfig,
    NoDetection,
    RecessNet,
    ShapeError,
    build_model,
    decode_predictions,
    select_top,
    target_assignment,
)


class NonFiniteLoss(Exception):
    """Loss became NaN/inf; carries the offending epoch/batch diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    momentum: float
    loss_weights: LossWeights
    max_epochs: int = 300
    batch_size: int = 16
    weight_decay: float = 0.0
    patience: int = 100
    seed: int = 0
    w_pos: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience must be <= max_epochs")
        if self.w_pos <= 0:
            raise ValueError("w_pos must be > 0")

    def to_json_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "loss_weights": {
                "alpha": self.loss_weights.alpha,
                "beta": self.loss_weights.beta,
                "gamma": self.loss_weights.gamma,
                "delta": self.loss_weights.delta,
            },
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "patience": self.patience,
            "seed": self.seed,
            "w_pos": self.w_pos,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TrainConfig":
        lw = obj["loss_weights"]
        return cls(
            learning_rate=float(obj["learning_rate"]),
            momentum=float(obj["momentum"]),
            loss_weights=LossWeights(
                alpha=float(lw["alpha"]), beta=float(lw["beta"]),
                gamma=float(lw.get("gamma", 0.0)), delta=float(lw.get("delta", 0.0)),
            ),
            max_epochs=int(obj.get("max_epochs", 300)),
            batch_size=int(obj.get("batch_size", 16)),
            weight_decay=float(obj.get("weight_decay", 0.0)),
            patience=int(obj.get("patience", 100)),
            seed=int(obj.get("seed", 0)),
            w_pos=float(obj.get("w_pos", 1.0)),
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: LossBreakdown
    val_fitness: float
    val_metrics: EvalReport

    def to_json_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss.to_json_dict(),
            "val_fitness": self.val_fitness,
            "val_metrics": self.val_metrics.to_json_dict(),
        }


def sgd_momentum_step(weights, gradients, velocity, lr: float, momentum: float):
    """One SGD-with-momentum update: v' = momentum*v + g; w' = w - lr*v'.

    Accepts single arrays/tensors or dicts keyed by parameter name.
    """
    if isinstance(weights, dict):
        if weights.keys() != gradients.keys() or weights.keys() != velocity.keys():
            raise ShapeError("weights/gradients/velocity key sets differ")
        new_w, new_v = {}, {}
        for name in weights:
            new_w[name], new_v[name] = sgd_momentum_step(
                weights[name], gradients[name], velocity[name], lr, momentum
            )
        return new_w, new_v
    if weights.shape != gradients.shape or weights.shape != velocity.shape:
        raise ShapeError(
            f"shape mismatch: w{tuple(weights.shape)} g{tuple(gradients.shape)} "
            f"v{tuple(velocity.shape)}"
        )
    new_velocity = momentum * velocity + gradients
    return weights - lr * new_velocity, new_velocity


def early_stopper(fitness_history, patience: int) -> tuple[bool, int]:
    """(stop, best_epoch): stop once `patience` epochs pass without a strict
    improvement over the running best; best_epoch is the first argmax.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not len(fitness_history):
        return False, 0
    best = int(np.argmax(fitness_history))
    return (len(fitness_history) - 1 - best) >= patience, best


@dataclass
class TrainData:
    """A split loaded into memory: images, encoded targets, and labels."""

    image_ids: list[str]
    images: torch.Tensor  # (N, 1, H, W) float32
    targets: list[DetectionTargets]
    labels: list[Label]
    gt_boxes: list[BBox]


def load_training_set(
    manifest: DatasetManifest, ids, images_root, config: ModelConfig
) -> TrainData:
    """Load a split's images and precompute detection targets."""
    images_root = Path(images_root)
    anns = [manifest.by_id(i) for i in ids]
    arrays = []
    for ann in anns:
        img = load_png(images_root / ann.image_path)
        if img.width != config.input_size or img.height != config.input_size:
            raise ShapeError(
                f"{ann.image_id}: image is {img.width}x{img.height}, "
                f"model expects {config.input_size}x{config.input_size}"
            )
        arrays.append(img.pixels.astype(np.float32))
    images = torch.from_numpy(np.stack(arrays)).unsqueeze(1)
    return TrainData(
        image_ids=[a.image_id for a in anns],
        images=images,
        targets=[target_assignment(a, config) for a in anns],
        labels=[a.label for a in anns],
        gt_boxes=[a.sqr_box for a in anns],
    )


def evaluate(
    model: RecessNet,
    data: TrainData,
    conf_threshold: float = 0.001,
    eval_batch: int = 32,
    max_detections: int = 100,
) -> EvalReport:
    """Full evaluation of one split: classification, detection, and mAP.

    mAP considers the top max_detections candidates per image (COCO's cap).
    """
    config = model.config
    pred_labels: list[Label] = []
    box_pairs: list[tuple[BBox | None, BBox]] = []
    per_image: list[PerImageResult] = []
    map_dets: list[tuple[str, object]] = []
    map_gts: dict[str, object] = {}

    from .imaging import LabeledBox  # local import keeps module top uncluttered

    with torch.no_grad():
        for start in range(0, len(data.image_ids), eval_batch):
            batch_ids = data.image_ids[start : start + eval_batch]
            x = data.images[start : start + eval_batch]
            raw, cls_probs = model(x, training=False)
            decoded = decode_predictions(raw, config, conf_threshold, max_detections)
            for k, image_id in enumerate(batch_ids):
                idx = start + k
                gt_box = data.gt_boxes[idx]
                gt_label = data.labels[idx]
                dets = decoded[k]
                try:
                    top = select_top(dets)
                    top_box, top_conf = top.box, top.confidence
                except NoDetection:
                    top, top_box, top_conf = None, None, 0.0

                if config.mode is Mode.MULTI_TASK:
                    p = cls_probs[k].cpu().numpy()
                    label = Label.DISTENDED if p[1] > p[0] else Label.NON_DISTENDED
                    confidence = float(p.max())
                    gt_map_label = Label.RECESS
                else:
                    label = top.label if top is not None else Label.NON_DISTENDED
                    confidence = top_conf
                    gt_map_label = gt_label

                pred_labels.append(label)
                box_pairs.append((top_box, gt_box))
                map_gts[image_id] = LabeledBox(box=gt_box, label=gt_map_label, confidence=1.0)
                map_dets.extend((image_id, d) for d in dets)
                pair_iou = detection_metrics([(top_box, gt_box)])[0]
                per_image.append(
                    PerImageResult(
                        image_id=image_id,
                        predicted_label=label,
                        confidence=confidence,
                        predicted_box=top_box,
                        iou=pair_iou,
                    )
                )

    cm = confusion(pred_labels, data.labels)
    sensitivity, specificity, ba = classification_metrics(cm)
    mean_iou, frac = detection_metrics(box_pairs)
    map50, map5095 = map_range(map_dets, map_gts)
    return EvalReport(
        balanced_accuracy=ba,
        sensitivity=sensitivity,
        specificity=specificity,
        mean_iou=mean_iou,
        frac_iou_ge_05=frac,
        map50=map50,
        map5095=map5095,
        confusion=cm,
        per_image=per_image,
    )


def fitness_for_mode(mode: Mode, report: EvalReport) -> float:
    if mode is Mode.MULTI_TASK:
        return multitask_fitness(report.balanced_accuracy, report.map50)
    return detection_fitness(report.map50, report.map5095)


def train(
    model: RecessNet,
    train_data: TrainData,
    val_data: TrainData,
    config: TrainConfig,
    fitness_fn=None,
) -> tuple[dict, list[EpochRecord]]:
    """Train with per-epoch validation; returns (best-epoch state_dict, history).

    `fitness_fn(report) -> float` overrides the mode's early-stop criterion.
    Batch shuffling is a pure function of config.seed.
    """
    mode = model.config.mode
    if fitness_fn is None:
        fitness_fn = lambda report: fitness_for_mode(mode, report)

    rng = np.random.default_rng(config.seed)
    params = dict(model.named_parameters())
    velocity = {name: torch.zeros_like(p) for name, p in params.items()}
    n = len(train_data.image_ids)

    history: list[EpochRecord] = []
    fitness_history: list[float] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_fitness = -np.inf

    for epoch in range(config.max_epochs):
        perm = rng.permutation(n)
        sums = np.zeros(5)
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            x = train_data.images[idx]
            targets = BatchTargets([train_data.targets[i] for i in idx])
            labels = [train_data.labels[i] for i in idx]

            raw, cls_probs = model(x, training=True)
            if mode is Mode.MULTI_TASK:
                breakdown = multitask_loss(
                    raw, cls_probs, targets, labels, config.loss_weights,
                    config.w_pos, model.config,
                )
            else:
                breakdown = detection_loss(raw, targets, config.loss_weights, model.config)

            total = breakdown.total
            if not torch.isfinite(total):
                raise NonFiniteLoss(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: "
                    f"{breakdown.to_json_dict()}"
                )
            model.zero_grad(set_to_none=False)
            total.backward()
            with torch.no_grad():
                for name, p in params.items():
                    grad = p.grad if p.grad is not None else torch.zeros_like(p)
                    if config.weight_decay > 0:
                        grad = grad + config.weight_decay * p
                    new_w, new_v = sgd_momentum_step(
                        p, grad, velocity[name], config.learning_rate, config.momentum
                    )
                    p.copy_(new_w)
                    velocity[name] = new_v

            d = breakdown.detach()
            sums += (d.l_box, d.l_obj, d.l_c, d.l_cls, d.total)
            n_batches += 1

        means = sums / max(n_batches, 1)
        train_loss = LossBreakdown(*means)
        val_report = evaluate(model, val_data)
        fitness = float(fitness_fn(val_report))
        history.append(EpochRecord(epoch, train_loss, fitness, val_report))
        fitness_history.append(fitness)

        if fitness > best_fitness:
            best_fitness = fitness
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

        stop, _best_epoch = early_stopper(fitness_history, config.patience)
        if stop:
            break

    return best_state, history


@dataclass
class CVResult:
    fold_reports: list[EvalReport]
    summary: dict
    histories: list[list[EpochRecord]] = field(default_factory=list)


_SUMMARY_METRICS = (
    "balanced_accuracy", "sensitivity", "specificity",
    "mean_iou", "frac_iou_ge_05", "map50", "map5095",
)


def summarize_folds(reports: list[EvalReport]) -> dict:
    """Mean and sample standard deviation per metric across folds."""
    out = {}
    for name in _SUMMARY_METRICS:
        values = np.array([getattr(r, name) for r in reports], dtype=float)
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out[name] = {"mean": float(values.mean()), "std": std}
    return out


def format_cv_table(summary: dict) -> str:
    """Text table with the headline metric columns."""
    cols = [
        ("Balanced accuracy", "balanced_accuracy"),
        ("Specificity", "specificity"),
        ("Sensitivity", "sensitivity"),
        ("IoU", "mean_iou"),
    ]
    header = " | ".join(name for name, _ in cols)
    row = " | ".join(
        f"{summary[key]['mean']:.2f} +/- {summary[key]['std']:.2f}" for _, key in cols
    )
    return header + "\n" + row


def cross_validate(
    manifest: DatasetManifest,
    images_root,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 5,
    split_seed: int = 0,
    val_ratio: float = 0.8,
    keep_histories: bool = False,
) -> CVResult:
    """Grouped k-fold: split, carve validation, set w_pos from the training
    portion only, train, and evaluate each fold's untouched test split.
    """
    splits = grouped_kfold(manifest, k=k, seed=split_seed)
    reports = []
    histories = []
    for split in splits:
        split = train_val_split(split, manifest, ratio=val_ratio, seed=split_seed + split.fold_index)
        fold_config = train_config
        if model_config.mode is Mode.MULTI_TASK:
            fold_config = replace(train_config, w_pos=class_weight(split.train_ids, manifest))
        model = build_model(model_config, seed=train_config.seed + split.fold_index)
        train_data = load_training_set(manifest, split.train_ids, images_root, model_config)
        val_data = load_training_set(manifest, split.val_ids, images_root, model_config)
        best_state, history = train(model, train_data, val_data, fold_config)
        model.load_state_dict(best_state)
        test_data = load_training_set(manifest, split.test_ids, images_root, model_config)
        reports.append(evaluate(model, test_data))
        if keep_histories:
            histories.append(history)
    return CVResult(fold_reports=reports, summary=summarize_folds(reports), histories=histories)


def save_history(history: list[EpochRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record.to_json_dict()) + "\n")
