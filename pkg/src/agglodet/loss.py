"""Multibox loss with online hard negative mining, plus the per-level
aggregation that supervises every hierarchy level at once.

Per image: classification is 2-class softmax cross-entropy over the positive
anchors plus the highest-loss negatives (at most 3 negatives per positive);
localization is smooth-L1 over positives only. The sum is scaled by the
positive count, classification weighted by lambda, and images averaged.
Levels are combined as a weighted sum so their gradients reach the shared
trunk simultaneously.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import MatchAssignment
from .errors import ConfigurationError
from .tensor import Tensor

DEFAULT_CLS_WEIGHT = 3.0  # lambda
DEFAULT_NEG_POS_RATIO = 3


@dataclass
class LevelPredictions:
    """Flattened per-anchor predictions for one hierarchy level."""

    cls_rows: Tensor  # [N, A, 2]
    loc_rows: Tensor  # [N, A, 4]
    layer_shapes: list[tuple[int, int]] = field(default_factory=list)


def flatten_level(head_outputs) -> LevelPredictions:
    """Stack per-layer head maps into per-anchor rows.

    Cells flatten row-major within a layer and layers stack shallow-to-deep,
    matching the anchor grid order exactly.
    """
    cls_rows = T.concat_rows([T.cells_to_rows(c) for c, _ in head_outputs])
    loc_rows = T.concat_rows([T.cells_to_rows(l) for _, l in head_outputs])
    shapes = [(c.shape[2], c.shape[3]) for c, _ in head_outputs]
    return LevelPredictions(cls_rows, loc_rows, shapes)


def hard_negative_mine(cls_logits: np.ndarray, assign: MatchAssignment,
                       ratio: int = DEFAULT_NEG_POS_RATIO) -> np.ndarray:
    """Indices of the negatives to keep: sorted by background-class loss
    descending, capped at ratio * positives, ties broken by anchor index."""
    n_pos = assign.n_positive
    neg_idx = np.flatnonzero(assign.labels < 0)
    if n_pos == 0 or len(neg_idx) == 0:
        return np.zeros(0, dtype=np.int64)
    z = cls_logits[neg_idx]
    zmax = z.max(axis=1)
    bg_loss = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1)) - z[:, 0]
    keep = min(ratio * n_pos, len(neg_idx))
    # lexsort is stable: primary key descending loss, ties fall back to index
    order = np.lexsort((neg_idx, -bg_loss))
    return np.sort(neg_idx[order[:keep]])


@dataclass
class MultiboxResult:
    loss: Tensor | None      # differentiable scalar, None if no positives
    cls_loss: float          # normalized CE term, before lambda
    loc_loss: float          # normalized smooth-L1 term
    n_positive: int
    n_negatives_kept: int
    cls_weight: float

    @property
    def total(self) -> float:
        return self.cls_weight * self.cls_loss + self.loc_loss


def multibox_loss(preds: LevelPredictions, assigns: list[MatchAssignment],
                  cls_weight: float = DEFAULT_CLS_WEIGHT,
                  neg_pos_ratio: int = DEFAULT_NEG_POS_RATIO) -> MultiboxResult:
    """One level's loss over a batch; mining runs per image, then images with
    positives are averaged."""
    n_images = preds.cls_rows.shape[0]
    n_anchors = preds.cls_rows.shape[1]
    if len(assigns) != n_images:
        raise ConfigurationError(
            f"multibox_loss: {len(assigns)} assignments for {n_images} images")

    per_image: list[Tensor] = []
    cls_total = loc_total = 0.0
    pos_total = neg_total = 0
    for n, assign in enumerate(assigns):
        if len(assign.labels) != n_anchors:
            raise ConfigurationError(
                f"multibox_loss: assignment has {len(assign.labels)} anchors, "
                f"predictions have {n_anchors}")
        pos_idx = np.flatnonzero(assign.labels >= 0)
        n_pos = len(pos_idx)
        if n_pos == 0:
            continue
        neg_idx = hard_negative_mine(preds.cls_rows.data[n], assign, neg_pos_ratio)
        sel = np.concatenate([pos_idx, neg_idx])
        labels = np.concatenate([np.ones(n_pos, dtype=np.int64),
                                 np.zeros(len(neg_idx), dtype=np.int64)])
        img_col = np.full(len(sel), n, dtype=np.int64)

        ce = T.softmax_cross_entropy_sum(
            T.select_rows(preds.cls_rows, img_col, sel), labels)
        sl1 = T.smooth_l1_sum(
            T.select_rows(preds.loc_rows, img_col[:n_pos], pos_idx),
            assign.loc_targets[pos_idx])
        img_loss = T.scale(T.add(T.scale(ce, cls_weight), sl1), 1.0 / n_pos)
        per_image.append(img_loss)

        cls_total += float(ce.data) / n_pos
        loc_total += float(sl1.data) / n_pos
        pos_total += n_pos
        neg_total += len(neg_idx)

    if not per_image:
        return MultiboxResult(None, 0.0, 0.0, 0, 0, cls_weight)
    total = per_image[0]
    for t in per_image[1:]:
        total = T.add(total, t)
    total = T.scale(total, 1.0 / len(per_image))
    return MultiboxResult(total, cls_total / len(per_image),
                          loc_total / len(per_image), pos_total, neg_total,
                          cls_weight)


@dataclass
class LossReport:
    total: float
    per_level: list[MultiboxResult]
    weights: list[float]

    def weighted_level_totals(self) -> list[float]:
        return [w * r.total for w, r in zip(self.weights, self.per_level)]


def hierarchical_loss(level_preds: list[LevelPredictions],
                      assigns: list[MatchAssignment], weights: list[float],
                      cls_weight: float = DEFAULT_CLS_WEIGHT,
                      neg_pos_ratio: int = DEFAULT_NEG_POS_RATIO
                      ) -> tuple[Tensor | None, LossReport]:
    """Weighted sum of per-level multibox losses over the shared assignment."""
    if len(weights) != len(level_preds):
        raise ConfigurationError(
            f"hierarchical_loss: {len(weights)} weights for "
            f"{len(level_preds)} levels")
    results = [multibox_loss(p, assigns, cls_weight, neg_pos_ratio)
               for p in level_preds]
    total: Tensor | None = None
    for w, r in zip(weights, results):
        if r.loss is None or w == 0.0:
            continue
        term = T.scale(r.loss, w)
        total = term if total is None else T.add(total, term)
    value = float(total.data) if total is not None else 0.0
    return total, LossReport(value, results, list(weights))
