"""Annotation ingestion, class statistics, and patient-grouped CV splitting.

Manifests are JSON-lines, one annotation object per line. Splits are grouped
by patient so no patient ever spans a train/test boundary.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import BBox, Label


class ParseError(Exception):
    """Malformed manifest line (carries the 1-based line number)."""


class ValidationError(Exception):
    """Structurally valid JSON that violates the annotation contract."""


class TooFewPatients(Exception):
    pass


class NoPositiveSamples(Exception):
    pass


class Side(enum.Enum):
    LEFT = "Left"
    RIGHT = "Right"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class Annotation:
    """Ground truth for one stored (cropped, 256x256) image."""

    image_id: str
    image_path: str
    patient_id: str
    side: Side
    visit: int
    label: Label
    sqr_box: BBox

    def __post_init__(self):
        if self.visit < 1:
            raise ValidationError(f"visit must be >= 1, got {self.visit}")
        if self.label not in (Label.DISTENDED, Label.NON_DISTENDED):
            raise ValidationError(f"annotation label must be Distended or NonDistended, got {self.label}")

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "patient_id": self.patient_id,
            "side": self.side.value,
            "visit": self.visit,
            "label": self.label.value,
            "sqr_box": self.sqr_box.to_list(),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Annotation":
        required = {"image_id", "image_path", "patient_id", "side", "visit", "label", "sqr_box"}
        missing = required - obj.keys()
        if missing:
            raise ValidationError(f"missing fields: {sorted(missing)}")
        unknown = obj.keys() - required
        if unknown:
            raise ValidationError(f"unknown fields: {sorted(unknown)}")
        try:
            side = Side(obj["side"])
        except ValueError:
            raise ValidationError(f"unknown side {obj['side']!r}") from None
        label_raw = obj["label"]
        if label_raw not in (Label.DISTENDED.value, Label.NON_DISTENDED.value):
            raise ValidationError(f"unknown label {label_raw!r}")
        return cls(
            image_id=str(obj["image_id"]),
            image_path=str(obj["image_path"]),
            patient_id=str(obj["patient_id"]),
            side=side,
            visit=int(obj["visit"]),
            label=Label(label_raw),
            sqr_box=BBox.from_list(obj["sqr_box"]),
        )


@dataclass
class DatasetManifest:
    entries: list[Annotation]
    counts: dict = field(init=False)

    def __post_init__(self):
        ids = [a.image_id for a in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate image_id(s): {dupes}")
        n_dist = sum(1 for a in self.entries if a.label is Label.DISTENDED)
        self.counts = {
            "n_total": len(self.entries),
            "n_distended": n_dist,
            "n_nondistended": len(self.entries) - n_dist,
            "n_patients": len({a.patient_id for a in self.entries}),
        }

    def by_id(self, image_id: str) -> Annotation:
        return self._index()[image_id]

    def _index(self) -> dict[str, Annotation]:
        idx = getattr(self, "_idx", None)
        if idx is None:
            idx = {a.image_id: a for a in self.entries}
            self._idx = idx
        return idx

    def patients(self) -> dict[str, list[str]]:
        """patient_id -> image_ids, in manifest order."""
        out: dict[str, list[str]] = {}
        for a in self.entries:
            out.setdefault(a.patient_id, []).append(a.image_id)
        return out


@dataclass
class FoldSplit:
    """fold_index serves as test; val may be carved from train later."""

    fold_index: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


def load_manifest(path, image_size: tuple[int, int] = (256, 256)) -> DatasetManifest:
    """Read and validate a JSON-lines manifest.

    Boxes are checked against `image_size` (stored images are 256x256 unless
    a pipeline says otherwise).
    """
    entries = []
    w, h = image_size
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"line {lineno}: {e.msg}") from None
            try:
                ann = Annotation.from_json_dict(obj)
            except (ValidationError, ValueError) as e:
                raise ValidationError(f"line {lineno}: {e}") from None
            b = ann.sqr_box
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w or b.y_max > h:
                raise ValidationError(
                    f"line {lineno}: sqr_box {b.to_list()} outside image bounds {w}x{h}"
                )
            entries.append(ann)
    return DatasetManifest(entries)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for ann in manifest.entries:
            fh.write(json.dumps(ann.to_json_dict()) + "\n")


def grouped_kfold(manifest: DatasetManifest, k: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Patient-grouped k-fold splits.

    Patients are shuffled by `seed`, then each is assigned to the fold with
    the currently smallest image count (ties to the lowest fold index).
    Fold i's images form test fold i; everything else is train. Folds can
    have slightly different sizes because patients carry 1..n images.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    patients = manifest.patients()
    if len(patients) < k:
        raise TooFewPatients(f"{len(patients)} patients < k={k}")
    order = sorted(patients)
    rng = np.random.default_rng(seed)
    order = [order[i] for i in rng.permutation(len(order))]

    fold_of: dict[str, int] = {}
    sizes = [0] * k
    for pid in order:
        target = min(range(k), key=lambda i: (sizes[i], i))
        fold_of[pid] = target
        sizes[target] += len(patients[pid])

    splits = []
    for i in range(k):
        test_ids = [a.image_id for a in manifest.entries if fold_of[a.patient_id] == i]
        train_ids = [a.image_id for a in manifest.entries if fold_of[a.patient_id] != i]
        splits.append(FoldSplit(fold_index=i, train_ids=train_ids, val_ids=[], test_ids=test_ids))
    return splits


def train_val_split(
    split: FoldSplit, manifest: DatasetManifest, ratio: float = 0.8, seed: int = 0
) -> FoldSplit:
    """Carve a patient-grouped validation set (~1-ratio of images) out of train."""
    if split.val_ids:
        raise ValueError("split already has a validation set")
    if not (0.0 < ratio < 1.0):
        raise ValueError("ratio must be in (0, 1)")
    train_set = set(split.train_ids)
    groups: dict[str, list[str]] = {}
    for a in manifest.entries:
        if a.image_id in train_set:
            groups.setdefault(a.patient_id, []).append(a.image_id)

    order = sorted(groups)
    rng = np.random.default_rng(seed)
    order = [order[i] for i in rng.permutation(len(order))]

    target_val = round((1.0 - ratio) * len(split.train_ids))
    val_patients = []
    n_val = 0
    for pid in order:
        if n_val >= target_val:
            break
        val_patients.append(pid)
        n_val += len(groups[pid])
    val_set = {img for pid in val_patients for img in groups[pid]}

    train_ids = [i for i in split.train_ids if i not in val_set]
    val_ids = [i for i in split.train_ids if i in val_set]
    return FoldSplit(
        fold_index=split.fold_index,
        train_ids=train_ids,
        val_ids=val_ids,
        test_ids=list(split.test_ids),
    )


def class_weight(train_ids, manifest: DatasetManifest) -> float:
    """Imbalance weight: NonDistended / Distended count over the training ids."""
    ids = set(train_ids)
    n_dist = sum(1 for a in manifest.entries if a.image_id in ids and a.label is Label.DISTENDED)
    n_non = sum(1 for a in manifest.entries if a.image_id in ids and a.label is Label.NON_DISTENDED)
    if n_dist == 0:
        raise NoPositiveSamples("no Distended samples in the training split")
    return n_non / n_dist


def save_folds(splits: list[FoldSplit], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [
        {
            "fold_index": s.fold_index,
            "train_ids": s.train_ids,
            "val_ids": s.val_ids,
            "test_ids": s.test_ids,
        }
        for s in splits
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_folds(path) -> list[FoldSplit]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return [
        FoldSplit(
            fold_index=int(s["fold_index"]),
            train_ids=list(s["train_ids"]),
            val_ids=list(s["val_ids"]),
            test_ids=list(s["test_ids"]),
        )
        for s in payload
    ]
