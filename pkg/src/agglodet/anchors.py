"""Anchor grids, ground-truth matching and box encode/decode.

Anchors are squares, one per feature cell: at layer l the grid has
(input_size / stride_l)^2 cells, centers at (i + 0.5) * stride_l, side equal
to the layer's anchor scale. Matching follows the two-rule strategy: every
anchor takes its best-overlap face when that overlap exceeds the threshold,
then every face forces its single best anchor positive regardless.

Boxes are (xmin, ymin, xmax, ymax) in image pixels. Offsets use the SSD
variance encoding (0.1 for centers, 0.2 for log sizes).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import STRIDES, BackboneConfig
from .errors import ConfigurationError

MATCH_THRESHOLD = 0.35
CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2

DESK_SCALES = (4, 8, 16, 32, 64, 128)


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ConfigurationError(f"Box: degenerate extents {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def side(self) -> float:
        return max(self.width, self.height)

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([b.as_array() for b in boxes])


@dataclass
class AnchorSet:
    boxes: np.ndarray        # (A, 4) float64
    layer_index: np.ndarray  # (A,) int, 0-based source layer
    scale: np.ndarray        # (A,) float, side length

    def __len__(self) -> int:
        return len(self.boxes)


def generate_anchors(config: BackboneConfig, scales=DESK_SCALES) -> AnchorSet:
    if len(scales) != len(STRIDES):
        raise ConfigurationError(
            f"anchors.scales: expected {len(STRIDES)} entries, got {len(scales)}")
    boxes, layers, sides = [], [], []
    for li, (stride, side) in enumerate(zip(STRIDES, scales)):
        cells = config.input_size // stride
        idx = np.arange(cells, dtype=np.float64)
        cy, cx = np.meshgrid(idx, idx, indexing="ij")  # row-major cells
        cx = (cx + 0.5) * stride
        cy = (cy + 0.5) * stride
        half = side / 2.0
        grid = np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1)
        boxes.append(grid.reshape(-1, 4))
        layers.append(np.full(cells * cells, li, dtype=np.int64))
        sides.append(np.full(cells * cells, side, dtype=np.float64))
    return AnchorSet(np.concatenate(boxes), np.concatenate(layers), np.concatenate(sides))


def jaccard(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (A, 4) and (B, 4) box arrays."""
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


@dataclass
class MatchAssignment:
    labels: np.ndarray       # (A,) int: face index >= 0 positive, -1 negative
    loc_targets: np.ndarray  # (A, 4) float, valid where labels >= 0

    @property
    def positive_mask(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def n_positive(self) -> int:
        return int(self.positive_mask.sum())


def match(anchors: AnchorSet, faces) -> MatchAssignment:
    """Assign each anchor positive (with a face index) or negative.

    Rule order: threshold matches first (argmax face per anchor when overlap
    > 0.35), then each face's best anchor is forced positive, overriding.
    Faces are processed in list order; ties on a face's best overlap go to
    the lowest anchor index.
    """
    a = len(anchors)
    labels = np.full(a, -1, dtype=np.int64)
    if len(faces) == 0:
        return MatchAssignment(labels, np.zeros((a, 4)))
    fb = boxes_to_array(faces)
    overlaps = iou_matrix(anchors.boxes, fb)  # (A, F)

    best_face = overlaps.argmax(axis=1)
    best_overlap = overlaps[np.arange(a), best_face]
    thresholded = best_overlap > MATCH_THRESHOLD
    labels[thresholded] = best_face[thresholded]

    # argmax returns the lowest index on ties, which is the tie-break rule
    best_anchor_per_face = overlaps.argmax(axis=0)
    for fi, ai in enumerate(best_anchor_per_face):
        labels[ai] = fi

    loc = np.zeros((a, 4))
    pos = labels >= 0
    if pos.any():
        loc[pos] = encode_array(anchors.boxes[pos], fb[labels[pos]])
    return MatchAssignment(labels, loc)


def encode_array(anchor_boxes: np.ndarray, face_boxes: np.ndarray) -> np.ndarray:
    acx = (anchor_boxes[:, 0] + anchor_boxes[:, 2]) / 2.0
    acy = (anchor_boxes[:, 1] + anchor_boxes[:, 3]) / 2.0
    aw = anchor_boxes[:, 2] - anchor_boxes[:, 0]
    ah = anchor_boxes[:, 3] - anchor_boxes[:, 1]
    fcx = (face_boxes[:, 0] + face_boxes[:, 2]) / 2.0
    fcy = (face_boxes[:, 1] + face_boxes[:, 3]) / 2.0
    fw = face_boxes[:, 2] - face_boxes[:, 0]
    fh = face_boxes[:, 3] - face_boxes[:, 1]
    return np.stack([
        (fcx - acx) / (aw * CENTER_VARIANCE),
        (fcy - acy) / (ah * CENTER_VARIANCE),
        np.log(fw / aw) / SIZE_VARIANCE,
        np.log(fh / ah) / SIZE_VARIANCE,
    ], axis=1)


def decode_array(anchor_boxes: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    acx = (anchor_boxes[:, 0] + anchor_boxes[:, 2]) / 2.0
    acy = (anchor_boxes[:, 1] + anchor_boxes[:, 3]) / 2.0
    aw = anchor_boxes[:, 2] - anchor_boxes[:, 0]
    ah = anchor_boxes[:, 3] - anchor_boxes[:, 1]
    cx = offsets[:, 0] * CENTER_VARIANCE * aw + acx
    cy = offsets[:, 1] * CENTER_VARIANCE * ah + acy
    w = np.exp(offsets[:, 2] * SIZE_VARIANCE) * aw
    h = np.exp(offsets[:, 3] * SIZE_VARIANCE) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode(anchor: Box, face: Box) -> np.ndarray:
    return encode_array(anchor.as_array()[None], face.as_array()[None])[0]


def decode(anchor: Box, offsets: np.ndarray) -> Box:
    x1, y1, x2, y2 = decode_array(anchor.as_array()[None], np.asarray(offsets, dtype=np.float64)[None])[0]
    return Box(x1, y1, x2, y2)
