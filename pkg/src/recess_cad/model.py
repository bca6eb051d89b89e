"""Reduced-scale detector: shared conv backbone, grid detection head, and the
optional whole-image classifier branch used in multi-task mode.

Two operating modes: a two-class detector (labels carried by the boxes) and a
multi-task net whose detector is single-class while a classifier branch reads
the shared features. The head predicts, per grid cell and anchor, raw values
(tx, ty, tw, th, objectness logit, class logits); decoding is a separate step.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import expit

from .dataset import Annotation
from .imaging import BBox, GrayImage, Label, LabeledBox

# detection class order for C=2; multi-task detection is single-class RECESS
CLASS_ORDER = (Label.NON_DISTENDED, Label.DISTENDED)

CHECKPOINT_FORMAT = "recess-cad-checkpoint-v1"
_MAGIC = b"RCAD"


class ShapeError(Exception):
    pass


class ModeError(Exception):
    pass


class NoDetection(Exception):
    """No candidate box survived decoding; reported distinctly to the user."""


class Mode(enum.Enum):
    DETECTION_TWO_CLASS = "detection"
    MULTI_TASK = "multitask"


@dataclass(frozen=True)
class ModelConfig:
    mode: Mode
    input_size: int = 256
    backbone_channels: tuple[int, ...] = (16, 32, 64, 128)
    grid_size: int = 16
    anchors_per_cell: int = 3
    anchor_priors: tuple[tuple[float, float], ...] = ((128.0, 6.0), (128.0, 14.0), (128.0, 32.0))
    classifier_hidden: tuple[int, int] = (1024, 512)
    dropout_rate: float = 0.1
    pooled_size: tuple[int, int] = (8, 8)

    def __post_init__(self):
        if self.input_size % self.grid_size != 0:
            raise ValueError(f"grid_size {self.grid_size} must divide input_size {self.input_size}")
        if self.grid_size * 2 ** len(self.backbone_channels) != self.input_size:
            raise ValueError(
                "backbone downsamples by 2 per stage: need "
                f"grid_size * 2^{len(self.backbone_channels)} == input_size"
            )
        if len(self.anchor_priors) != self.anchors_per_cell:
            raise ValueError("anchor_priors must have anchors_per_cell entries")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def num_classes(self) -> int:
        return 2 if self.mode is Mode.DETECTION_TWO_CLASS else 1

    @property
    def stride(self) -> int:
        return self.input_size // self.grid_size

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "input_size": self.input_size,
            "backbone_channels": list(self.backbone_channels),
            "grid_size": self.grid_size,
            "anchors_per_cell": self.anchors_per_cell,
            "anchor_priors": [list(p) for p in self.anchor_priors],
            "classifier_hidden": list(self.classifier_hidden),
            "dropout_rate": self.dropout_rate,
            "pooled_size": list(self.pooled_size),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModelConfig":
        return cls(
            mode=Mode(obj["mode"]),
            input_size=int(obj["input_size"]),
            backbone_channels=tuple(int(c) for c in obj["backbone_channels"]),
            grid_size=int(obj["grid_size"]),
            anchors_per_cell=int(obj["anchors_per_cell"]),
            anchor_priors=tuple((float(w), float(h)) for w, h in obj["anchor_priors"]),
            classifier_hidden=tuple(int(u) for u in obj["classifier_hidden"]),
            dropout_rate=float(obj["dropout_rate"]),
            pooled_size=tuple(int(p) for p in obj["pooled_size"]),
        )


def _norm(channels: int) -> nn.GroupNorm:
    for groups in (8, 4, 2, 1):
        if channels % groups == 0:
            return nn.GroupNorm(groups, channels)
    return nn.GroupNorm(1, channels)


class RecessNet(nn.Module):
    """Backbone + detection head (+ classifier branch in multi-task mode)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = 1
        for ch in config.backbone_channels:
            layers += [
                nn.Conv2d(in_ch, ch, 3, stride=2, padding=1),
                _norm(ch),
                nn.ReLU(inplace=True),
                nn.Conv2d(ch, ch, 3, stride=1, padding=1),
                _norm(ch),
                nn.ReLU(inplace=True),
            ]
            in_ch = ch
        self.backbone = nn.Sequential(*layers)

        c = config.num_classes
        self.head = nn.Conv2d(in_ch, config.anchors_per_cell * (5 + c), 1)
        with torch.no_grad():
            # bias objectness low so early training is not flooded with boxes
            for a in range(config.anchors_per_cell):
                self.head.bias[a * (5 + c) + 4] = -4.0

        if config.mode is Mode.MULTI_TASK:
            ph, pw = config.pooled_size
            self.classifier_input_width = in_ch * ph * pw
            h1, h2 = config.classifier_hidden
            self.pool = nn.AdaptiveAvgPool2d(config.pooled_size)
            self.fc1 = nn.Linear(self.classifier_input_width, h1)
            self.fc2 = nn.Linear(h1, h2)
            self.fc3 = nn.Linear(h2, 2)
        else:
            self.classifier_input_width = None

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, input_size, input_size) -> (B, C_last, S, S)."""
        if images.ndim == 3:
            images = images.unsqueeze(1)
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, H, W) images, got {tuple(images.shape)}")
        n = self.config.input_size
        if images.shape[2] != n or images.shape[3] != n:
            raise ShapeError(f"expected {n}x{n} input, got {images.shape[2]}x{images.shape[3]}")
        return self.backbone(images)

    def detection_head_forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, C_last, S, S) -> raw prediction (B, S, S, A, 5+C), no activations."""
        s = self.config.grid_size
        if features.ndim != 4 or features.shape[2] != s or features.shape[3] != s:
            raise ShapeError(f"expected (B, C, {s}, {s}) features, got {tuple(features.shape)}")
        a, c = self.config.anchors_per_cell, self.config.num_classes
        out = self.head(features)
        b = out.shape[0]
        return out.view(b, a, 5 + c, s, s).permute(0, 3, 4, 1, 2).contiguous()

    def classifier_forward(self, features: torch.Tensor, training: bool = False) -> torch.Tensor:
        """(B, C_last, S, S) -> class probabilities (B, 2), softmax-normalized."""
        if self.config.mode is not Mode.MULTI_TASK:
            raise ModeError("classifier branch exists only in multi-task mode")
        x = torch.flatten(self.pool(features), 1)
        x = F.relu(self.fc1(x))
        x = F.dropout(x, p=self.config.dropout_rate, training=training)
        x = F.relu(self.fc2(x))
        return F.softmax(self.fc3(x), dim=1)

    def forward(self, images: torch.Tensor, training: bool = False):
        """Returns (raw_prediction, class_probs); class_probs is None in detection mode."""
        features = self.backbone_forward(images)
        raw = self.detection_head_forward(features)
        if self.config.mode is Mode.MULTI_TASK:
            return raw, self.classifier_forward(features, training=training)
        return raw, None


def build_model(config: ModelConfig, seed: int = 0) -> RecessNet:
    torch.manual_seed(seed)
    return RecessNet(config)


def images_to_tensor(images) -> torch.Tensor:
    """Stack GrayImages (or 2-D arrays) into a float32 (B, 1, H, W) tensor."""
    arrays = [im.pixels if isinstance(im, GrayImage) else np.asarray(im) for im in images]
    stack = np.stack(arrays).astype(np.float32)
    return torch.from_numpy(stack).unsqueeze(1)


def decode_predictions(
    raw: torch.Tensor,
    config: ModelConfig,
    conf_threshold: float,
    max_detections: int | None = None,
) -> list[list[LabeledBox]]:
    """Decode raw head output into per-image candidate boxes.

    Per anchor: center = (cell + sigmoid(tx, ty)) * stride, size =
    prior * exp(tw, th) clamped to the image, confidence =
    sigmoid(objectness) * max softmax class prob (1 for single-class).
    Candidates under the threshold are dropped; output sorted by
    confidence descending (ties keep decode order), optionally truncated
    to the top max_detections per image.
    """
    arr = raw.detach().cpu().double().numpy()
    if arr.ndim == 4:
        arr = arr[None]
    b, s, _, a, _ = arr.shape
    stride = config.stride
    c = config.num_classes

    obj = expit(arr[..., 4])
    if c == 1:
        cls_prob = np.ones_like(obj)
        cls_idx = np.zeros_like(obj, dtype=np.intp)
    else:
        logits = arr[..., 5:]
        logits = logits - logits.max(axis=-1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=-1, keepdims=True)
        cls_prob = probs.max(axis=-1)
        cls_idx = probs.argmax(axis=-1)
    conf = obj * cls_prob

    cols = np.arange(s)[None, :, None]
    rows = np.arange(s)[:, None, None]
    cx = (cols + expit(arr[..., 0])) * stride
    cy = (rows + expit(arr[..., 1])) * stride
    priors = np.asarray(config.anchor_priors)  # (A, 2)
    w = np.clip(priors[:, 0] * np.exp(np.clip(arr[..., 2], -30, 30)), 1e-4, config.input_size)
    h = np.clip(priors[:, 1] * np.exp(np.clip(arr[..., 3], -30, 30)), 1e-4, config.input_size)

    out: list[list[LabeledBox]] = []
    for i in range(b):
        flat_conf = conf[i].reshape(-1)  # (row, col, anchor) in C order
        keep = np.flatnonzero(flat_conf >= conf_threshold)
        order = keep[np.argsort(-flat_conf[keep], kind="stable")]
        if max_detections is not None:
            order = order[:max_detections]
        dets = []
        fx0 = (cx[i] - w[i] / 2).reshape(-1)
        fy0 = (cy[i] - h[i] / 2).reshape(-1)
        fx1 = (cx[i] + w[i] / 2).reshape(-1)
        fy1 = (cy[i] + h[i] / 2).reshape(-1)
        flat_idx = cls_idx[i].reshape(-1)
        for j in order:
            label = Label.RECESS if c == 1 else CLASS_ORDER[flat_idx[j]]
            box = BBox(float(fx0[j]), float(fy0[j]), float(fx1[j]), float(fy1[j]))
            dets.append(LabeledBox(box=box, label=label, confidence=float(flat_conf[j])))
        out.append(dets)
    return out


def select_top(detections: list[LabeledBox]) -> LabeledBox:
    """Highest-confidence detection; ties broken by earliest position."""
    if not detections:
        raise NoDetection("no recess candidate found")
    best = detections[0]
    for d in detections[1:]:
        if d.confidence > best.confidence:
            best = d
    return best


@dataclass
class DetectionTargets:
    """Per-image training targets on the (S, S, A) anchor grid."""

    obj: np.ndarray  # (S, S, A) float32, 1 at the positive anchor
    box: np.ndarray  # (S, S, A, 4) float32, (tx, ty, tw, th) at the positive anchor
    pos: tuple[int, int, int]  # (row, col, anchor)
    cls_index: int
    gt_box: np.ndarray  # (4,) float64 xyxy


def _shape_iou(w: float, h: float, priors: np.ndarray) -> np.ndarray:
    inter = np.minimum(w, priors[:, 0]) * np.minimum(h, priors[:, 1])
    union = w * h + priors[:, 0] * priors[:, 1] - inter
    return inter / union


def target_assignment(gt: Annotation, config: ModelConfig) -> DetectionTargets:
    """Single positive anchor: best shape-IoU prior in the cell holding the gt center."""
    s, a = config.grid_size, config.anchors_per_cell
    stride = config.stride
    box = gt.sqr_box
    cx, cy = box.center
    col = min(int(cx / stride), s - 1)
    row = min(int(cy / stride), s - 1)
    priors = np.asarray(config.anchor_priors)
    anchor = int(np.argmax(_shape_iou(box.width, box.height, priors)))

    eps = 1e-9
    fx = np.clip(cx / stride - col, eps, 1.0 - eps)
    fy = np.clip(cy / stride - row, eps, 1.0 - eps)
    tx = float(np.log(fx / (1.0 - fx)))
    ty = float(np.log(fy / (1.0 - fy)))
    tw = float(np.log(box.width / priors[anchor, 0]))
    th = float(np.log(box.height / priors[anchor, 1]))

    obj = np.zeros((s, s, a), dtype=np.float32)
    boxes = np.zeros((s, s, a, 4), dtype=np.float32)
    obj[row, col, anchor] = 1.0
    boxes[row, col, anchor] = (tx, ty, tw, th)
    if config.num_classes == 1:
        cls_index = 0
    else:
        cls_index = CLASS_ORDER.index(gt.label)
    return DetectionTargets(
        obj=obj,
        box=boxes,
        pos=(row, col, anchor),
        cls_index=cls_index,
        gt_box=np.array(box.to_list(), dtype=np.float64),
    )


def save_checkpoint(path, model: RecessNet, extra: dict | None = None) -> None:
    """Single-file container: magic, JSON header, then raw float32 arrays."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    arrays = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        blob = arr.tobytes()
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_json_dict(),
        "extra": extra or {},
        "arrays": arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[RecessNet, ModelConfig, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        payload = fh.read()
    config = ModelConfig.from_json_dict(header["config"])
    model = RecessNet(config)
    state = {}
    for meta in header["arrays"]:
        raw = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.float32).reshape(meta["shape"]).copy()
        state[meta["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model, config, header.get("extra", {})
