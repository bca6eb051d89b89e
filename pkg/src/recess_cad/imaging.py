"""Core image and box types plus the exact geometric operations shared everywhere.

All pixel algorithms operate on grayscale rasters with intensities in [0, 1]
and on axis-aligned boxes in continuous pixel coordinates (origin top-left).
Everything here is a pure function over immutable values.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class Label(enum.Enum):
    """Class labels. RECESS is only used by single-class detection output."""

    DISTENDED = "Distended"
    NON_DISTENDED = "NonDistended"
    RECESS = "Recess"


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, continuous pixel coordinates, origin top-left."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def to_list(self) -> list[float]:
        """JSON form: [x_min, y_min, x_max, y_max]."""
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max)]

    @classmethod
    def from_list(cls, coords) -> "BBox":
        if len(coords) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))


@dataclass(frozen=True)
class LabeledBox:
    """Detection output: box, class label and confidence in [0, 1]."""

    box: BBox
    label: Label
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


class GrayImage:
    """2-D intensity raster, values in [0, 1], stored as float64 (H, W)."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 2 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError(f"expected non-empty 2-D array, got shape {pixels.shape}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, GrayImage) and np.array_equal(self.pixels, other.pixels)


class BinaryMask:
    """2-D boolean raster with the same dimensions contract as GrayImage."""

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"expected non-empty 2-D array, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint, symmetric."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def resize(img: GrayImage, target_w: int, target_h: int) -> GrayImage:
    """Bilinear resize with half-pixel sample centers and edge clamping.

    Output pixel (i, j) samples the input at
    ((j + 0.5) * w_in / w_out - 0.5, (i + 0.5) * h_in / h_out - 0.5),
    so an identity resize is pixel-exact and outputs stay inside the
    input's intensity range (convex combination of four neighbours).
    """
    if target_w < 1 or target_h < 1:
        raise ValueError("target dimensions must be >= 1")
    src = img.pixels
    h_in, w_in = src.shape
    if (target_h, target_w) == (h_in, w_in):
        return GrayImage(src.copy())

    xs = (np.arange(target_w) + 0.5) * (w_in / target_w) - 0.5
    ys = (np.arange(target_h) + 0.5) * (h_in / target_h) - 0.5
    x0 = np.clip(np.floor(xs), 0, w_in - 1).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, h_in - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, w_in - 1)
    y1 = np.minimum(y0 + 1, h_in - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)

    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return GrayImage(np.clip(out, 0.0, 1.0))


def scale_box(box: BBox, from_w: float, from_h: float, to_w: float, to_h: float) -> BBox:
    """Map a box between coordinate frames by per-axis scale ratios."""
    if min(from_w, from_h, to_w, to_h) < 1:
        raise ValueError("frame dimensions must be >= 1")
    sx = to_w / from_w
    sy = to_h / from_h
    return BBox(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy)


def load_png(path) -> GrayImage:
    """Load an 8-bit grayscale PNG, mapping 0-255 to [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return GrayImage(arr / 255.0)


def save_png(img: GrayImage, path) -> None:
    """Write as 8-bit grayscale PNG (round-to-nearest on the 0-255 scale)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(img.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
