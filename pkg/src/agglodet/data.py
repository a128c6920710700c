"""Synthetic multi-scale face dataset: generation, augmentation, disk I/O.

Each image is a textured noise background with 1-8 "faces" (bright warm
ellipses with dark eyes and mouth) plus distractor shapes that share the
face color statistics but not the structure: plain filled ellipses, rings
and rectangles. Face side lengths are log-uniform across the anchor scale
range so every detection layer sees positives; the smallest faces are a few
pixels and genuinely hard.

Samples are deterministic per (seed, index). On disk a dataset is a
directory of binary PPM images plus one annotation text file:
image path and face count on one line, then one ``xmin ymin xmax ymax``
line per face.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .anchors import Box
from .errors import ConfigurationError
from .images import bilinear_resize, read_ppm, write_ppm
from .tensor import Tensor

BUCKETS = ("hard", "medium", "easy")


@dataclass
class DataConfig:
    image_size: int = 128
    min_faces: int = 1
    max_faces: int = 8
    face_side_range: tuple[float, float] = (4.0, 128.0)
    max_distractors: int = 4
    # face side thresholds at native resolution: hard < 2*stride_2,
    # medium < 2*stride_4, easy otherwise
    hard_below: float = 16.0
    medium_below: float = 64.0
    # augmentation
    crop_scale_range: tuple[float, float] = (0.3, 1.0)
    flip_probability: float = 0.5
    brightness_jitter: float = 0.08
    contrast_jitter: float = 0.15

    def __post_init__(self):
        if self.min_faces < 1 or self.max_faces < self.min_faces:
            raise ConfigurationError("data.min_faces/max_faces: need 1 <= min <= max")
        lo, hi = self.face_side_range
        if not (0 < lo < hi):
            raise ConfigurationError("data.face_side_range: need 0 < lo < hi")

    def bucket_of(self, side: float) -> str:
        if side < self.hard_below:
            return "hard"
        if side < self.medium_below:
            return "medium"
        return "easy"


@dataclass
class Sample:
    image: Tensor          # (3, S, S) float32 in [0, 1]
    faces: list[Box]
    buckets: list[str]
    image_id: int = 0


# ---------------------------------------------------------------------------
# rasterization helpers (coverage-antialiased, vectorized per object)


def _paint(image: np.ndarray, coverage: np.ndarray, color, ys: slice, xs: slice) -> None:
    region = image[:, ys, xs]
    region *= 1.0 - coverage
    region += coverage * np.asarray(color, dtype=np.float32)[:, None, None]


def _object_window(size: int, cx: float, cy: float, rx: float, ry: float):
    x0 = max(0, int(math.floor(cx - rx - 2)))
    x1 = min(size, int(math.ceil(cx + rx + 2)))
    y0 = max(0, int(math.floor(cy - ry - 2)))
    y1 = min(size, int(math.ceil(cy + ry + 2)))
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float32)
    return (slice(y0, y1), slice(x0, x1)), xx + 0.5 - cx, yy + 0.5 - cy


def _ellipse_coverage(dx, dy, rx, ry):
    # signed pixel distance to the boundary, positive inside
    q = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2)
    d = (1.0 - q) * min(rx, ry)
    return np.clip(d + 0.5, 0.0, 1.0)


def _draw_ellipse(image, cx, cy, rx, ry, color):
    size = image.shape[1]
    (ys, xs), dx, dy = _object_window(size, cx, cy, rx, ry)
    if dx.size == 0:
        return
    _paint(image, _ellipse_coverage(dx, dy, rx, ry), color, ys, xs)


def _draw_ring(image, cx, cy, rx, ry, thickness, color):
    size = image.shape[1]
    (ys, xs), dx, dy = _object_window(size, cx, cy, rx, ry)
    if dx.size == 0:
        return
    q = np.sqrt((dx / rx) ** 2 + (dy / ry) ** 2)
    d = np.abs((1.0 - q) * min(rx, ry))
    cov = np.clip(thickness / 2.0 - d + 0.5, 0.0, 1.0)
    _paint(image, cov, color, ys, xs)


def _draw_rect(image, cx, cy, hw, hh, color):
    size = image.shape[1]
    (ys, xs), dx, dy = _object_window(size, cx, cy, hw, hh)
    if dx.size == 0:
        return
    cov_x = np.clip(np.minimum(dx + hw, hw - dx) + 0.5, 0.0, 1.0)
    cov_y = np.clip(np.minimum(dy + hh, hh - dy) + 0.5, 0.0, 1.0)
    _paint(image, cov_x * cov_y, color, ys, xs)


def _face_color(rng) -> np.ndarray:
    r = rng.uniform(0.72, 0.95)
    g = r * rng.uniform(0.55, 0.78)
    b = g * rng.uniform(0.5, 0.85)
    return np.array([r, g, b], dtype=np.float32)


def _draw_face(image, rng, cx, cy, side) -> None:
    color = _face_color(rng)
    rx = side / 2.0 * rng.uniform(0.9, 1.0)
    ry = side / 2.0 * rng.uniform(0.9, 1.0)
    _draw_ellipse(image, cx, cy, rx, ry, color)
    dark = np.full(3, rng.uniform(0.02, 0.16), dtype=np.float32)
    eye_r = max(0.45, 0.09 * side)
    for sx in (-1.0, 1.0):
        _draw_ellipse(image, cx + sx * 0.22 * side, cy - 0.12 * side,
                      eye_r, eye_r, dark)
    _draw_rect(image, cx, cy + 0.22 * side, max(0.45, 0.2 * side),
               max(0.3, 0.05 * side), dark)


def _draw_distractor(image, rng, cx, cy, side) -> None:
    color = _face_color(rng) if rng.random() < 0.5 else \
        rng.uniform(0.1, 0.95, 3).astype(np.float32)
    kind = rng.integers(0, 3)
    if kind == 0:
        _draw_rect(image, cx, cy, side / 2 * rng.uniform(0.7, 1.0),
                   side / 2 * rng.uniform(0.7, 1.0), color)
    elif kind == 1:
        _draw_ellipse(image, cx, cy, side / 2 * rng.uniform(0.85, 1.0),
                      side / 2 * rng.uniform(0.85, 1.0), color)
    else:
        _draw_ring(image, cx, cy, side / 2, side / 2,
                   max(1.0, 0.12 * side), color)


def _background(rng, size: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.55, size=3).astype(np.float32)
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    coarse = max(4, size // 16)
    low = rng.uniform(-0.12, 0.12, size=(3, coarse, coarse)).astype(np.float32)
    img += bilinear_resize(low, size, size)
    img += rng.uniform(-0.04, 0.04, size=(3, size, size)).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def _render_sample(rng: np.random.Generator, cfg: DataConfig, image_id: int) -> Sample:
    size = cfg.image_size
    img = _background(rng, size)

    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        side = _log_uniform(rng, cfg.face_side_range)
        side = min(side, size - 2.0)
        half = side / 2.0
        cx = rng.uniform(half, size - half)
        cy = rng.uniform(half, size - half)
        _draw_distractor(img, rng, cx, cy, side)

    n_faces = int(rng.integers(cfg.min_faces, cfg.max_faces + 1))
    faces: list[Box] = []
    for _ in range(n_faces):
        side = min(_log_uniform(rng, cfg.face_side_range), size - 1.0)
        half = side / 2.0
        box = None
        for _attempt in range(25):
            cx = rng.uniform(half, size - half)
            cy = rng.uniform(half, size - half)
            cand = Box(cx - half, cy - half, cx + half, cy + half)
            if all(_box_iou(cand, f) < 0.3 for f in faces):
                box = cand
                break
        if box is None:
            continue  # image too crowded for this size; skip the face
        _draw_face(img, rng, (box.xmin + box.xmax) / 2, (box.ymin + box.ymax) / 2,
                   box.side)
        faces.append(box)

    buckets = [cfg.bucket_of(f.side) for f in faces]
    return Sample(Tensor(img.astype(np.float32)), faces, buckets, image_id)


def _log_uniform(rng, bounds) -> float:
    lo, hi = bounds
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _box_iou(a: Box, b: Box) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.width * a.height + b.width * b.height - inter)


def generate_dataset(seed: int, n_images: int,
                     config: DataConfig | None = None) -> list[Sample]:
    """Deterministic synthetic dataset: same seed, same bytes."""
    cfg = config or DataConfig()
    children = np.random.SeedSequence(seed).spawn(n_images)
    return [_render_sample(np.random.default_rng(child), cfg, idx)
            for idx, child in enumerate(children)]


# ---------------------------------------------------------------------------
# augmentation


def augment(sample: Sample, rng: np.random.Generator,
            config: DataConfig | None = None) -> Sample:
    """Random square crop (0.3-1.0 of the short side) resized back to the
    training size, horizontal flip, per-channel brightness/contrast jitter.
    Faces whose center falls outside the crop are dropped."""
    cfg = config or DataConfig()
    img = sample.image.data
    size = img.shape[-1]
    out_size = cfg.image_size

    lo, hi = cfg.crop_scale_range
    crop = int(round(rng.uniform(lo, hi) * size))
    crop = max(8, min(crop, size))
    x0 = int(rng.integers(0, size - crop + 1))
    y0 = int(rng.integers(0, size - crop + 1))
    patch = img[:, y0:y0 + crop, x0:x0 + crop]

    ratio = out_size / crop
    faces: list[Box] = []
    for f in sample.faces:
        cx = (f.xmin + f.xmax) / 2 - x0
        cy = (f.ymin + f.ymax) / 2 - y0
        if not (0 <= cx < crop and 0 <= cy < crop):
            continue
        x1 = max(f.xmin - x0, 0.0) * ratio
        y1 = max(f.ymin - y0, 0.0) * ratio
        x2 = min(f.xmax - x0, float(crop)) * ratio
        y2 = min(f.ymax - y0, float(crop)) * ratio
        if x2 > x1 and y2 > y1:
            faces.append(Box(x1, y1, x2, y2))

    out = patch if crop == out_size else bilinear_resize(patch, out_size, out_size)
    out = np.ascontiguousarray(out)

    if rng.random() < cfg.flip_probability:
        out = out[:, :, ::-1].copy()
        faces = [Box(out_size - f.xmax, f.ymin, out_size - f.xmin, f.ymax)
                 for f in faces]

    alpha = rng.uniform(1 - cfg.contrast_jitter, 1 + cfg.contrast_jitter, 3)
    beta = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter, 3)
    out = np.clip(out * alpha[:, None, None].astype(np.float32)
                  + beta[:, None, None].astype(np.float32), 0.0, 1.0)

    buckets = [cfg.bucket_of(f.side) for f in faces]
    return Sample(Tensor(out.astype(np.float32)), faces, buckets, sample.image_id)


# ---------------------------------------------------------------------------
# disk layout


def write_dataset(directory, samples: list[Sample]) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"images/img_{s.image_id:05d}.ppm"
        write_ppm(root / rel, s.image.data)
        lines.append(f"{rel} {len(s.faces)}")
        for f in s.faces:
            lines.append(f"{f.xmin:.3f} {f.ymin:.3f} {f.xmax:.3f} {f.ymax:.3f}")
    (root / "annotations.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory, config: DataConfig | None = None) -> list[Sample]:
    cfg = config or DataConfig()
    root = Path(directory)
    ann = root / "annotations.txt"
    if not ann.exists():
        raise ConfigurationError(f"dataset {directory}: missing annotations.txt")
    lines = ann.read_text().splitlines()
    samples: list[Sample] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        rel, count = lines[i].rsplit(" ", 1)
        faces = []
        for j in range(int(count)):
            vals = [float(v) for v in lines[i + 1 + j].split()]
            faces.append(Box(*vals))
        image = read_ppm(root / rel)
        buckets = [cfg.bucket_of(f.side) for f in faces]
        samples.append(Sample(Tensor(image), faces, buckets, len(samples)))
        i += 1 + int(count)
    return samples
