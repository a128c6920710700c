"""Detection-time pipeline: score, decode, suppress, optionally multi-scale.

Predictions come from the top hierarchy level's heads on the six tap maps.
Anchors scoring at or above the threshold are decoded, clipped to the image,
greedily suppressed by IoU and truncated to the top K by score. Multi-scale
testing resizes the image per scale (aspect preserved, padded up to a
stride-divisible square), maps boxes back to original coordinates, merges
everything and runs one final suppression pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import AnchorSet, decode_array, generate_anchors, iou_matrix
from .backbone import STRIDES, BackboneConfig
from .errors import ConfigurationError
from .images import bilinear_resize
from .loss import flatten_level
from .tensor import Tensor


@dataclass
class InferenceConfig:
    score_threshold: float = 0.05   # evaluation default; use 0.5 for demos
    nms_threshold: float = 0.3
    top_k: int = 400
    shorter_sides: tuple[int, ...] = (128, 154)  # multi-scale testing sizes

    def __post_init__(self):
        self.shorter_sides = tuple(int(s) for s in self.shorter_sides)
        if not self.shorter_sides:
            raise ConfigurationError("inference.shorter_sides: must be nonempty")


@dataclass
class DetectionSet:
    boxes: np.ndarray   # (K, 4) clipped to the image
    scores: np.ndarray  # (K,) descending
    image_id: int = 0

    def __len__(self) -> int:
        return len(self.scores)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy descending-score suppression; returns kept indices. A box is
    dropped when its IoU with any already-kept box exceeds the threshold.
    Equal scores fall back to lower index first."""
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    ious = iou_matrix(np.asarray(boxes, dtype=np.float64),
                      np.asarray(boxes, dtype=np.float64))
    kept: list[int] = []
    for i in order:
        if all(ious[i, j] <= iou_threshold for j in kept):
            kept.append(int(i))
    return np.array(kept, dtype=np.int64)


def detect_from_rows(cls_rows: np.ndarray, loc_rows: np.ndarray,
                     anchors: AnchorSet, image_size: float,
                     score_threshold: float, nms_threshold: float,
                     top_k: int, image_id: int = 0) -> DetectionSet:
    """Decode flattened per-anchor predictions into a suppressed detection set."""
    z = cls_rows - cls_rows.max(axis=1, keepdims=True)
    ez = np.exp(z)
    scores = ez[:, 1] / ez.sum(axis=1)
    keep = scores >= score_threshold
    if not keep.any():
        return DetectionSet(np.zeros((0, 4)), np.zeros(0), image_id)
    boxes = decode_array(anchors.boxes[keep], loc_rows[keep])
    scores = scores[keep]
    boxes = np.clip(boxes, 0.0, image_size)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[valid], scores[valid]
    kept = nms(boxes, scores, nms_threshold)[:top_k]
    return DetectionSet(boxes[kept], scores[kept], image_id)


def _anchors_for(model, size: int, scales) -> AnchorSet:
    bb = BackboneConfig(input_size=size,
                        stage_channels=model.config.backbone.stage_channels)
    return generate_anchors(bb, scales) if scales is not None else generate_anchors(bb)


def detect(model, image: Tensor, anchors: AnchorSet | None = None,
           config: InferenceConfig | None = None, image_id: int = 0,
           any_size: bool = False, anchor_scales=None) -> DetectionSet:
    """Single-scale detection with the model's top-level heads."""
    config = config or InferenceConfig()
    size = image.shape[-1]
    if anchors is None:
        anchors = _anchors_for(model, size, anchor_scales)
    hier = model.hierarchy(image, any_size=any_size)
    preds = flatten_level(model.head_outputs(hier, model.config.hierarchy.levels))
    return detect_from_rows(preds.cls_rows.data[0], preds.loc_rows.data[0],
                            anchors, size, config.score_threshold,
                            config.nms_threshold, config.top_k, image_id)


def multiscale_detect(image: np.ndarray, model, shorter_sides,
                      config: InferenceConfig | None = None,
                      anchor_scales=None, image_id: int = 0) -> DetectionSet:
    """Run detection at several image scales and merge with one final NMS.

    ``image`` is a CHW array; each entry of ``shorter_sides`` is the target
    shorter side in pixels (equal to the side here, inputs being square).
    The resized image is zero-padded bottom-right up to the next multiple of
    the largest stride so the trunk can pool all the way down.
    """
    config = config or InferenceConfig()
    if not len(shorter_sides):
        raise ConfigurationError("multiscale_detect: shorter_sides is empty")
    orig = image.shape[-1]
    seen: set[int] = set()
    all_boxes, all_scores = [], []
    for s in shorter_sides:
        s = int(s)
        if s in seen:
            continue
        seen.add(s)
        ratio = s / orig
        resized = image if s == orig else bilinear_resize(image, s, s)
        padded_size = max(STRIDES[-1], math.ceil(s / STRIDES[-1]) * STRIDES[-1])
        if padded_size != s:
            padded = np.zeros((3, padded_size, padded_size), dtype=resized.dtype)
            padded[:, :s, :s] = resized
        else:
            padded = resized
        anchors = _anchors_for(model, padded_size, anchor_scales)
        det = detect(model, Tensor(padded[None]), anchors=anchors,
                     config=config, any_size=True)
        if len(det):
            all_boxes.append(np.clip(det.boxes / ratio, 0.0, orig))
            all_scores.append(det.scores)
    if not all_boxes:
        return DetectionSet(np.zeros((0, 4)), np.zeros(0), image_id)
    boxes = np.concatenate(all_boxes)
    scores = np.concatenate(all_scores)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[valid], scores[valid]
    kept = nms(boxes, scores, config.nms_threshold)[:config.top_k]
    return DetectionSet(boxes[kept], scores[kept], image_id)


# ---------------------------------------------------------------------------
# detection record files: one line per detection


def write_detections(path, detections) -> None:
    """Text format: image_id xmin ymin xmax ymax score, one per line."""
    with open(path, "w") as fh:
        for det in detections:
            for box, score in zip(det.boxes, det.scores):
                fh.write(f"{det.image_id} {box[0]:.3f} {box[1]:.3f} "
                         f"{box[2]:.3f} {box[3]:.3f} {score:.6f}\n")


def read_detections(path) -> list[DetectionSet]:
    by_image: dict[int, list[tuple[np.ndarray, float]]] = {}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ConfigurationError(f"detections {path}: bad record {line!r}")
            img = int(parts[0])
            by_image.setdefault(img, []).append(
                (np.array([float(v) for v in parts[1:5]]), float(parts[5])))
    out = []
    for img in sorted(by_image):
        rows = by_image[img]
        boxes = np.stack([r[0] for r in rows])
        scores = np.array([r[1] for r in rows])
        order = np.argsort(-scores, kind="stable")
        out.append(DetectionSet(boxes[order], scores[order], img))
    return out
