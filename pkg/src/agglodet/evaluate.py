"""Average-precision evaluation with size-bucketed splits.

Detections are pooled across images, walked in descending score order and
greedily matched to unmatched ground truth at IoU >= 0.5. When a bucket is
requested, ground truth outside the bucket becomes ignore regions: a
detection overlapping only ignored faces counts neither as hit nor as false
alarm. AP is the area under the monotone precision envelope over all points
of the resulting curve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import boxes_to_array, iou_matrix
from .data import BUCKETS, Sample
from .errors import ConfigurationError
from .inference import DetectionSet


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    ap: float
    n_gt: int


def evaluate_ap(detections: list[DetectionSet], samples: list[Sample],
                iou_threshold: float = 0.5, bucket: str | None = None
                ) -> PRCurve | None:
    """AP over pooled detections. Returns None when no ground truth falls in
    the requested bucket (AP undefined)."""
    if bucket is not None and bucket not in BUCKETS:
        raise ConfigurationError(f"evaluate_ap: unknown bucket {bucket!r}")
    by_id = {s.image_id: s for s in samples}

    gt_boxes: dict[int, np.ndarray] = {}
    gt_counted: dict[int, np.ndarray] = {}  # in-bucket mask
    gt_matched: dict[int, np.ndarray] = {}
    n_gt = 0
    for s in samples:
        boxes = boxes_to_array(s.faces)
        counted = np.array([bucket is None or b == bucket for b in s.buckets],
                           dtype=bool)
        gt_boxes[s.image_id] = boxes
        gt_counted[s.image_id] = counted
        gt_matched[s.image_id] = np.zeros(len(boxes), dtype=bool)
        n_gt += int(counted.sum())
    if n_gt == 0:
        return None

    pooled = []
    for det in detections:
        if det.image_id not in by_id:
            raise ConfigurationError(
                f"evaluate_ap: detection for unknown image {det.image_id}")
        for k in range(len(det)):
            pooled.append((float(det.scores[k]), det.image_id, k))
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))

    det_lookup = {d.image_id: d for d in detections}
    tps, fps = [], []
    for score, img, k in pooled:
        box = det_lookup[img].boxes[k][None, :]
        boxes = gt_boxes[img]
        if len(boxes) == 0:
            tps.append(0)
            fps.append(1)
            continue
        ious = iou_matrix(box, boxes)[0]
        counted = gt_counted[img]
        matched = gt_matched[img]
        best = -1
        best_iou = iou_threshold
        for gi in np.argsort(-ious):
            if ious[gi] < iou_threshold:
                break
            if counted[gi]:
                best, best_iou = gi, ious[gi]
                break
        if best >= 0:
            if not matched[best]:
                matched[best] = True
                tps.append(1)
                fps.append(0)
            else:
                tps.append(0)
                fps.append(1)
        else:
            # no counted GT above threshold; ignore regions absorb the hit
            if np.any(ious[~counted] >= iou_threshold):
                continue
            tps.append(0)
            fps.append(1)

    if not tps:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0, n_gt)
    tp = np.cumsum(tps)
    fp = np.cumsum(fps)
    recalls = tp / n_gt
    precisions = tp / np.maximum(tp + fp, 1)
    return PRCurve(recalls, precisions, _area_under_envelope(recalls, precisions), n_gt)


def _area_under_envelope(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-points interpolated area: precision envelope integrated over recall."""
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[changed] - mrec[changed - 1]) * mpre[changed]))


def evaluate_all_buckets(detections: list[DetectionSet], samples: list[Sample],
                         iou_threshold: float = 0.5) -> dict[str, PRCurve | None]:
    return {b: evaluate_ap(detections, samples, iou_threshold, bucket=b)
            for b in BUCKETS}


def write_pr_curve(path, curve: PRCurve) -> None:
    """Two-column recall/precision text for external plotting."""
    with open(path, "w") as fh:
        fh.write(f"# ap {curve.ap:.6f} n_gt {curve.n_gt}\n")
        for r, p in zip(curve.recalls, curve.precisions):
            fh.write(f"{r:.6f} {p:.6f}\n")
