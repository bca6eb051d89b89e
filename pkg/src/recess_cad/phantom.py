"""Synthetic ultrasound phantom generator with known recess geometry.

Renders the characteristic scene of a knee recess longitudinal scan: a bright
near-horizontal femur band in the lower half with an acoustic shadow below it,
a bright patellar arc at the right border, and a dark recess band between
them. Distension is operationalized purely as recess thickness, drawn from a
class-dependent range. Everything is deterministic in (seed, index).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Annotation, DatasetManifest, Side, save_manifest
from .imaging import BBox, GrayImage, Label, save_png
from .preprocess import CropRegion

# palette (clean-scene intensities before speckle)
TISSUE_BASE = 0.32
FEMUR_INTENSITY = 0.86
PATELLA_INTENSITY = 0.80
RECESS_INTENSITY = 0.06
SHADOW_FACTOR = 0.45
SHADOW_GRAIN_INTENSITY = 0.30
SHADOW_GRAIN_DENSITY = 0.45
CLUTTER_INTENSITY = 0.10
CANVAS_BACKGROUND = 0.03
GLYPH_INTENSITY = 0.80

RAW_CANVAS_W = 1024
RAW_CANVAS_H = 780


@dataclass(frozen=True)
class PhantomParams:
    image_size: int = 256
    p_distended: float = 0.25
    recess_thickness_nondistended: tuple[float, float] = (4.0, 10.0)
    recess_thickness_distended: tuple[float, float] = (16.0, 40.0)
    speckle_noise_sigma: float = 0.18
    clutter_level: float = 0.25
    seed: int = 0
    borderline: bool = False

    def __post_init__(self):
        if not (0.0 <= self.p_distended <= 1.0):
            raise ValueError("p_distended must be in [0, 1]")
        if not (0.0 <= self.clutter_level <= 1.0):
            raise ValueError("clutter_level must be in [0, 1]")
        lo_n, hi_n = self.recess_thickness_nondistended
        lo_d, hi_d = self.recess_thickness_distended
        if not (0 < lo_n <= hi_n and 0 < lo_d <= hi_d):
            raise ValueError("thickness ranges must be positive and ordered")
        if not self.borderline and hi_n >= lo_d:
            raise ValueError(
                "thickness ranges overlap; pass borderline=True to allow overlapping ranges"
            )


@dataclass(frozen=True)
class SceneGeometry:
    """Pixel regions of the rendered structures (for measurement/tests)."""

    recess_box: BBox
    femur_box: BBox
    patella_x_min: float
    distended: bool
    thickness: float


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed % (2**63), *key]))


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 6) -> np.ndarray:
    """Low-frequency field in [-1, 1] from a bilinearly upsampled coarse grid."""
    coarse = rng.uniform(-1.0, 1.0, size=(cells, cells))
    ys = np.linspace(0, cells - 1, h)
    xs = np.linspace(0, cells - 1, w)
    y0 = np.clip(ys.astype(np.intp), 0, cells - 2)
    x0 = np.clip(xs.astype(np.intp), 0, cells - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx + c10 * fy * (1 - fx) + c11 * fy * fx


def render_scene(
    rng: np.random.Generator, width: int, height: int, params: PhantomParams
) -> tuple[np.ndarray, SceneGeometry]:
    """Render a clean (noise-free) scene; speckle is applied by the caller."""
    w, h = width, height
    xx = np.arange(w)[None, :]
    yy = np.arange(h)[:, None]

    img = np.full((h, w), TISSUE_BASE) + 0.04 * _smooth_field(rng, h, w)

    # femur: bright band in the lower half with a gentle slope
    femur_y0 = rng.uniform(0.62, 0.74) * h
    femur_slope = rng.uniform(-0.04, 0.07)
    femur_thick = rng.uniform(0.035, 0.055) * h
    femur_x1 = rng.uniform(0.80, 0.90) * w
    femur_line = femur_y0 + femur_slope * xx
    femur_mask = (
        (yy >= femur_line) & (yy < femur_line + femur_thick) & (xx <= femur_x1)
    )
    # acoustic shadow: bone blocks the signal below the femur
    shadow_mask = (yy >= femur_line + femur_thick) & (xx <= femur_x1)
    img[shadow_mask] *= SHADOW_FACTOR
    grain = rng.random((h, w)) < SHADOW_GRAIN_DENSITY
    img[shadow_mask & grain] = SHADOW_GRAIN_INTENSITY
    img[femur_mask] = FEMUR_INTENSITY

    # patella: bright arc clipped at the right border, upper half
    pat_cx = rng.uniform(1.00, 1.06) * w
    pat_cy = rng.uniform(0.22, 0.36) * h
    pat_rx = rng.uniform(0.16, 0.24) * w
    pat_ry = rng.uniform(0.22, 0.32) * h
    pat_band = rng.uniform(0.02, 0.035) * h
    r = np.sqrt(((xx - pat_cx) / pat_rx) ** 2 + ((yy - pat_cy) / pat_ry) ** 2)
    pat_mask = np.abs(r - 1.0) * min(pat_rx, pat_ry) < pat_band
    img[pat_mask] = PATELLA_INTENSITY
    patella_x_min = float(pat_cx - pat_rx - pat_band)

    # recess: dark band between femur and patella
    distended = bool(rng.random() < params.p_distended)
    lo, hi = (
        params.recess_thickness_distended if distended else params.recess_thickness_nondistended
    )
    scale = min(w, h) / params.image_size  # thickness ranges are given at image_size
    thickness = rng.uniform(lo, hi) * scale
    rec_x0 = rng.uniform(0.06, 0.14) * w
    rec_x1 = min(rng.uniform(0.55, 0.74) * w, patella_x_min - 0.04 * w)
    rec_slope = rng.uniform(-0.008, 0.008)
    gap = rng.uniform(0.03, 0.07) * h
    mid_x = 0.5 * (rec_x0 + rec_x1)
    femur_top_at = femur_y0 + femur_slope * np.clip(np.array([rec_x0, rec_x1, mid_x]), 0, w)
    rec_yc = float(femur_top_at.min()) - gap - thickness / 2.0
    rec_line = rec_yc + rec_slope * (xx - mid_x)
    rec_mask = (
        (np.abs(yy - rec_line) <= thickness / 2.0) & (xx >= rec_x0) & (xx <= rec_x1)
    )
    img[rec_mask] = RECESS_INTENSITY

    # distractor blobs elsewhere in the tissue
    n_blobs = int(np.floor(4 * params.clutter_level + 1e-9))
    rec_rows = np.flatnonzero(rec_mask.any(axis=1))
    rec_cols = np.flatnonzero(rec_mask.any(axis=0))
    rec_box = BBox(
        float(rec_cols[0]), float(rec_rows[0]), float(rec_cols[-1] + 1), float(rec_rows[-1] + 1)
    )
    for _ in range(n_blobs):
        for _attempt in range(20):
            bx = rng.uniform(0.08, 0.9) * w
            by = rng.uniform(0.08, 0.45) * h
            br = rng.uniform(0.015, 0.035) * min(w, h)
            clear = (
                bx + br < rec_box.x_min - 4
                or bx - br > rec_box.x_max + 4
                or by + br < rec_box.y_min - 4
                or by - br > rec_box.y_max + 4
            )
            if clear and by + br < femur_line.min() - 4:
                blob = ((xx - bx) ** 2 + (yy - by) ** 2) <= br**2
                img[blob] = CLUTTER_INTENSITY
                break

    femur_rows = np.flatnonzero(femur_mask.any(axis=1))
    femur_cols = np.flatnonzero(femur_mask.any(axis=0))
    femur_box = BBox(
        float(femur_cols[0]),
        float(femur_rows[0]),
        float(femur_cols[-1] + 1),
        float(femur_rows[-1] + 1),
    )
    geometry = SceneGeometry(
        recess_box=rec_box,
        femur_box=femur_box,
        patella_x_min=patella_x_min,
        distended=distended,
        thickness=float(thickness),
    )
    return np.clip(img, 0.0, 1.0), geometry


def _apply_speckle(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0.0:
        return np.clip(img, 0.0, 1.0)
    noisy = img * (1.0 + sigma * rng.standard_normal(img.shape))
    return np.clip(noisy, 0.0, 1.0)


def _patient_of(seed: int, index: int) -> tuple[str, int]:
    """Deterministic (patient_id, position) for an image index: 1-4 images each."""
    rng = _rng(seed, 0)
    covered = 0
    patient = 0
    while True:
        size = int(rng.integers(1, 5))
        if covered + size > index:
            return f"patient_{patient:04d}", index - covered
        covered += size
        patient += 1


def _annotation(image_id: str, image_path: str, seed: int, index: int,
                label: Label, box: BBox) -> Annotation:
    patient_id, pos = _patient_of(seed, index)
    side = Side.LEFT if pos % 2 == 0 else Side.RIGHT
    return Annotation(
        image_id=image_id,
        image_path=image_path,
        patient_id=patient_id,
        side=side,
        visit=1 + pos // 2,
        label=label,
        sqr_box=box,
    )


def generate_phantom(params: PhantomParams, index: int) -> tuple[GrayImage, Annotation]:
    """One labeled phantom image, deterministic in (params.seed, index)."""
    rng = _rng(params.seed, 1, index)
    pixels, geom = render_scene(rng, params.image_size, params.image_size, params)
    pixels = _apply_speckle(pixels, params.speckle_noise_sigma, rng)
    label = Label.DISTENDED if geom.distended else Label.NON_DISTENDED
    image_id = f"phantom_{index:05d}"
    ann = _annotation(image_id, f"images/{image_id}.png", params.seed, index, label, geom.recess_box)
    return GrayImage(pixels), ann


def generate_raw_canvas(
    params: PhantomParams, index: int
) -> tuple[GrayImage, CropRegion, Annotation]:
    """A device-style raw frame: phantom embedded in a dark canvas with text clutter.

    The returned annotation's box is in raw-canvas coordinates; the CropRegion
    is the ground-truth extent of the embedded scan.
    """
    rng = _rng(params.seed, 2, index)
    fw = int(rng.integers(520, 881))
    fh = int(rng.integers(420, 621))
    x0 = int(rng.integers(40, RAW_CANVAS_W - fw - 39))
    y0 = int(rng.integers(70, RAW_CANVAS_H - fh - 69))

    scene, geom = render_scene(rng, fw, fh, params)
    scene = _apply_speckle(scene, params.speckle_noise_sigma, rng)

    canvas = np.full((RAW_CANVAS_H, RAW_CANVAS_W), CANVAS_BACKGROUND)
    canvas[y0 : y0 + fh, x0 : x0 + fw] = scene
    _draw_glyph_rows(canvas, rng, frame=(x0, y0, x0 + fw, y0 + fh), level=params.clutter_level)

    truth = CropRegion(BBox(float(x0), float(y0), float(x0 + fw), float(y0 + fh)))
    rb = geom.recess_box
    raw_box = BBox(rb.x_min + x0, rb.y_min + y0, rb.x_max + x0, rb.y_max + y0)
    label = Label.DISTENDED if geom.distended else Label.NON_DISTENDED
    image_id = f"raw_{index:05d}"
    ann = _annotation(image_id, f"raw/{image_id}.png", params.seed, index, label, raw_box)
    return GrayImage(canvas), truth, ann


def _draw_glyph_rows(canvas: np.ndarray, rng: np.random.Generator,
                     frame: tuple[int, int, int, int], level: float) -> None:
    """Text-like clutter outside the frame; every glyph component < 1000 px."""
    fx0, fy0, fx1, fy1 = frame
    h, w = canvas.shape
    strips = []
    if fy0 >= 26:
        strips.append((10, fy0 - 12, 10, w - 10))  # above the frame
    if h - fy1 >= 26:
        strips.append((fy1 + 10, h - 12, 10, w - 10))  # below
    if fx0 >= 60:
        strips.append((10, h - 12, 10, fx0 - 12))  # left margin
    n_rows = 2 + int(np.floor(3 * level + 1e-9))
    for _ in range(n_rows):
        if not strips:
            return
        sy0, sy1, sx0, sx1 = strips[int(rng.integers(0, len(strips)))]
        gh = int(rng.integers(6, 10))
        if sy1 - gh <= sy0 or sx1 - 80 <= sx0:
            continue
        ry = int(rng.integers(sy0, sy1 - gh))
        rx = int(rng.integers(sx0, max(sx0 + 1, sx1 - 120)))
        n_chars = int(rng.integers(6, 19))
        cx = rx
        for _c in range(n_chars):
            gw = int(rng.integers(3, 6))
            if cx + gw >= sx1:
                break
            bits = rng.random((gh, gw)) < 0.6
            block = canvas[ry : ry + gh, cx : cx + gw]
            block[bits] = GLYPH_INTENSITY
            cx += gw + 2  # >= 2 px gap keeps glyph components separate


def generate_dataset(params: PhantomParams, n: int, out_dir) -> DatasetManifest:
    """Write n phantom PNGs plus a JSON-lines manifest under out_dir."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        img, ann = generate_phantom(params, i)
        save_png(img, out_dir / ann.image_path)
        entries.append(ann)
    manifest = DatasetManifest(entries)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
