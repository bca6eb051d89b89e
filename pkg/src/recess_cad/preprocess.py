"""Automatic extraction of the ultrasound scan region from the raw device frame.

The raw frame mixes the actual scan with burned-in text and UI chrome. The
pipeline binarizes the intensity gradient, drops small connected components,
dilates to fill interior gaps, opens to shave off merged clutter, and crops
the original image to the surviving region.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import BBox, BinaryMask, GrayImage, resize

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class NoFrameFound(Exception):
    """Raised when the pipeline finds no scan region (uniform/degenerate input)."""


class KernelShape(enum.Enum):
    RECT = "Rect"
    ELLIPSE = "Ellipse"


@dataclass(frozen=True)
class MorphKernel:
    """Structuring element; width and height must be odd."""

    shape: KernelShape
    width: int
    height: int

    def __post_init__(self):
        for n in (self.width, self.height):
            if n < 1 or n % 2 == 0:
                raise ValueError(f"kernel sides must be odd and >= 1, got {self.width}x{self.height}")

    def footprint(self) -> np.ndarray:
        if self.shape is KernelShape.RECT:
            return np.ones((self.height, self.width), dtype=bool)
        # inscribed ellipse, evaluated at pixel centers
        ry = (self.height - 1) / 2.0
        rx = (self.width - 1) / 2.0
        y, x = np.ogrid[-ry : ry + 1, -rx : rx + 1]
        return (x / max(rx, 0.5)) ** 2 + (y / max(ry, 0.5)) ** 2 <= 1.0


@dataclass(frozen=True)
class CropRegion:
    """Crop box in raw-image pixel coordinates."""

    box: BBox


@dataclass(frozen=True)
class PreprocessConfig:
    """Tunables for the frame-extraction pipeline (all have working defaults)."""

    threshold: float = 0.04
    min_size: int = 1000
    dilate_kernel: MorphKernel = field(
        default_factory=lambda: MorphKernel(KernelShape.RECT, 15, 15)
    )
    open_kernel: MorphKernel = field(
        default_factory=lambda: MorphKernel(KernelShape.RECT, 31, 31)
    )


def gradient_mask(img: GrayImage, threshold: float) -> BinaryMask:
    """Pixels whose gradient magnitude exceeds `threshold`.

    Gradient is central differences on an edge-replicated image,
    magnitude sqrt(gx^2 + gy^2).
    """
    if not (0.0 <= threshold <= 1.0):
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    padded = np.pad(img.pixels, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return BinaryMask(np.hypot(gx, gy) > threshold)


def remove_small_components(mask: BinaryMask, min_size: int = 1000) -> BinaryMask:
    """Drop 8-connected components with fewer than `min_size` true pixels."""
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    labels, n = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    if n == 0:
        return BinaryMask(np.zeros_like(mask.bits))
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return BinaryMask(keep[labels])


def dilate(mask: BinaryMask, kernel: MorphKernel) -> BinaryMask:
    """Morphological dilation, clipped at the image borders."""
    return BinaryMask(ndimage.binary_dilation(mask.bits, structure=kernel.footprint()))


def erode(mask: BinaryMask, kernel: MorphKernel) -> BinaryMask:
    """Morphological erosion (outside the image treated as false)."""
    return BinaryMask(ndimage.binary_erosion(mask.bits, structure=kernel.footprint()))


def opening(mask: BinaryMask, kernel: MorphKernel) -> BinaryMask:
    """Erosion followed by dilation with the same kernel. Idempotent."""
    return dilate(erode(mask, kernel), kernel)


def _tight_box(bits: np.ndarray) -> BBox:
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    # box spans full extent of the true pixels (pixel i covers [i, i+1))
    return BBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def extract_scan_frame(
    raw: GrayImage,
    cfg: PreprocessConfig = PreprocessConfig(),
    resize_to: tuple[int, int] | None = None,
) -> tuple[GrayImage, CropRegion]:
    """Locate the scan region in a raw device frame and crop to it.

    Runs gradient_mask -> remove_small_components -> dilate -> opening. The
    opened mask decides which region survives; the crop box is the tight
    bounding box of the surviving gradient support (dilation inflates every
    boundary by the kernel radius, so measuring extents on the pre-dilation
    mask keeps the crop tight). Raises NoFrameFound when nothing survives.
    """
    if raw.width < 64 or raw.height < 64:
        raise ValueError(f"raw image too small: {raw.width}x{raw.height} (need >= 64x64)")
    support = remove_small_components(gradient_mask(raw, cfg.threshold), cfg.min_size)
    opened = opening(dilate(support, cfg.dilate_kernel), cfg.open_kernel)
    keep = support.bits & opened.bits
    if not keep.any():
        raise NoFrameFound("no scan region found; image must be cropped manually")
    box = _tight_box(keep)
    x0, y0 = int(box.x_min), int(box.y_min)
    x1, y1 = int(box.x_max), int(box.y_max)
    cropped = GrayImage(raw.pixels[y0:y1, x0:x1].copy())
    if resize_to is not None:
        cropped = resize(cropped, resize_to[0], resize_to[1])
    return cropped, CropRegion(box)
