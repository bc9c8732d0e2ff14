"""Set-prediction training objective: bipartite matching between predicted
and ground-truth objects, then classification + L1 + generalized-IoU losses,
with auxiliary per-decoder-layer terms.

Matching runs on detached values (the assignment is treated as piecewise
constant); the losses themselves are built on the tape. Boxes are
(cx, cy, w, h) in [0, 1] throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor import Tensor, as_tensor, concatenate, maximum, minimum


@dataclass
class DetectionSet:
    """Per-query predictions: class logits [..., Q, n_classes+1] (last column
    is "no object") and sigmoid boxes [..., Q, 4]. A leading dim, when
    present, is the batch."""

    logits: Tensor
    boxes: Tensor
    provenance: str = ""

    @property
    def n_queries(self) -> int:
        return self.logits.shape[-2]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[-1] - 1

    def image(self, index: int) -> "DetectionSet":
        """Slice one image's predictions out of a batched set."""
        return DetectionSet(logits=self.logits[index], boxes=self.boxes[index],
                            provenance=self.provenance)


@dataclass
class GroundTruth:
    """Annotated objects of one image: class ids and (cx, cy, w, h) boxes."""

    class_ids: np.ndarray                      # [n] int
    boxes: np.ndarray                          # [n, 4] float in [0, 1]
    split_tags: list = field(default_factory=list)  # "base" / "novel" per object

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.class_ids.shape[0] != self.boxes.shape[0]:
            raise ValueError("class_ids and boxes disagree on object count")

    def __len__(self) -> int:
        return int(self.class_ids.shape[0])


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    aux: float = 1.0
    no_object: float = 0.1

    def __post_init__(self):
        for name in ("cls", "l1", "giou", "aux"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class MatchResult:
    """Injective map ground-truth index -> query index, plus its total cost."""

    assignment: tuple   # tuple of (gt_index, query_index), gt ascending
    total_cost: float

    def query_for(self, gt_index: int) -> int:
        return dict(self.assignment)[gt_index]


# -- boxes ---------------------------------------------------------------------


def box_cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def giou(a: Tensor, b: Tensor) -> Tensor:
    """Generalized IoU of matched (cx, cy, w, h) box rows; result in (-1, 1].

    Degenerate (non-positive width/height) boxes are rejected.
    """
    a, b = as_tensor(a), as_tensor(b)
    a = a.reshape(-1, 4) if a.ndim != 2 else a
    b = b.reshape(-1, 4) if b.ndim != 2 else b
    if np.any(a.data[:, 2:] <= 0) or np.any(b.data[:, 2:] <= 0):
        raise ValueError("giou: boxes must have positive width and height")

    def split(t):
        half_w, half_h = t[:, 2] * 0.5, t[:, 3] * 0.5
        return (t[:, 0] - half_w, t[:, 1] - half_h,
                t[:, 0] + half_w, t[:, 1] + half_h)

    ax0, ay0, ax1, ay1 = split(a)
    bx0, by0, bx1, by1 = split(b)
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    iw = (minimum(ax1, bx1) - maximum(ax0, bx0)).relu()
    ih = (minimum(ay1, by1) - maximum(ay0, by0)).relu()
    inter = iw * ih
    union = area_a + area_b - inter
    hull = (maximum(ax1, bx1) - minimum(ax0, bx0)) * (maximum(ay1, by1) - minimum(ay0, by0))
    return inter / union - (hull - union) / hull


def giou_matrix(gt_boxes: np.ndarray, pred_boxes: np.ndarray) -> np.ndarray:
    """Plain-numpy pairwise GIoU [n_gt, n_pred] for cost construction."""
    g = box_cxcywh_to_xyxy(gt_boxes)[:, None, :]
    p = box_cxcywh_to_xyxy(pred_boxes)[None, :, :]
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    iw = np.clip(np.minimum(g[..., 2], p[..., 2]) - np.maximum(g[..., 0], p[..., 0]), 0, None)
    ih = np.clip(np.minimum(g[..., 3], p[..., 3]) - np.maximum(g[..., 1], p[..., 1]), 0, None)
    inter = iw * ih
    union = area_g + area_p - inter
    hull = ((np.maximum(g[..., 2], p[..., 2]) - np.minimum(g[..., 0], p[..., 0]))
            * (np.maximum(g[..., 3], p[..., 3]) - np.minimum(g[..., 1], p[..., 1])))
    return inter / union - (hull - union) / hull


# -- matching ------------------------------------------------------------------


def pairwise_cost(pred: DetectionSet, gt: GroundTruth,
                  weights: LossWeights = LossWeights()) -> np.ndarray:
    """Match-cost matrix [n_gt, n_queries] on detached prediction values."""
    probs = as_tensor(pred.logits.data).softmax(axis=-1).numpy()
    pred_boxes = pred.boxes.data
    cost_cls = -probs[:, gt.class_ids].T                      # [n_gt, Q]
    cost_l1 = np.abs(gt.boxes[:, None, :] - pred_boxes[None, :, :]).sum(axis=-1)
    cost_giou = -giou_matrix(gt.boxes, pred_boxes)
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def hungarian_match(cost: np.ndarray, rel_tol: float = 1e-9) -> MatchResult:
    """Minimum-cost injective assignment of rows (ground truths) to columns
    (queries); among optima, the lexicographically smallest query sequence.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_gt, n_q = cost.shape
    if n_gt > n_q:
        raise ValueError(f"more ground truths ({n_gt}) than queries ({n_q})")
    if n_gt == 0:
        return MatchResult(assignment=(), total_cost=0.0)

    def solve(sub: np.ndarray) -> float:
        if sub.shape[0] == 0:
            return 0.0
        rows, cols = linear_sum_assignment(sub)
        return float(sub[rows, cols].sum())

    best_total = solve(cost)
    tol = rel_tol * max(1.0, float(np.abs(cost).max()))
    free = list(range(n_q))
    chosen = []
    fixed_cost = 0.0
    for g in range(n_gt):
        for q in free:
            remainder = cost[np.ix_(range(g + 1, n_gt), [c for c in free if c != q])]
            if fixed_cost + cost[g, q] + solve(remainder) <= best_total + tol:
                chosen.append((g, q))
                fixed_cost += cost[g, q]
                free.remove(q)
                break
        else:
            raise RuntimeError("assignment canonicalization failed")
    return MatchResult(assignment=tuple(chosen), total_cost=best_total)


# -- losses --------------------------------------------------------------------


def _single_set_loss(pred: DetectionSet, gt: GroundTruth,
                     weights: LossWeights) -> Tensor:
    n_q = pred.n_queries
    n_cls = pred.n_classes
    no_object = n_cls

    target = np.full(n_q, no_object, dtype=np.int64)
    matched_q: list[int] = []
    gt_order: list[int] = []
    if len(gt) > 0:
        match = hungarian_match(pairwise_cost(pred, gt, weights))
        for g, q in match.assignment:
            target[q] = gt.class_ids[g]
            matched_q.append(q)
            gt_order.append(g)

    onehot = np.zeros((n_q, n_cls + 1))
    onehot[np.arange(n_q), target] = 1.0
    ce_per_query = -(pred.logits.log_softmax(axis=-1) * as_tensor(onehot)).sum(axis=-1)
    query_w = np.where(target == no_object, weights.no_object, 1.0)
    cls_loss = (ce_per_query * as_tensor(query_w)).sum() * (1.0 / query_w.sum())

    total = cls_loss * weights.cls
    if matched_q:
        pred_boxes = pred.boxes[np.array(matched_q)]
        gt_boxes = as_tensor(gt.boxes[np.array(gt_order)])
        n = float(len(matched_q))
        l1 = (pred_boxes - gt_boxes).abs().sum() * (1.0 / n)
        giou_loss = (1.0 - giou(pred_boxes, gt_boxes)).sum() * (1.0 / n)
        total = total + l1 * weights.l1 + giou_loss * weights.giou
    return total


def detection_loss(per_layer_preds: list, fused_pred: DetectionSet,
                   gt: GroundTruth, weights: LossWeights = LossWeights()) -> Tensor:
    """Main loss on the fused prediction plus auxiliary losses on every raw
    decoder-layer prediction, each independently matched."""
    total = _single_set_loss(fused_pred, gt, weights)
    for pred in per_layer_preds:
        total = total + _single_set_loss(pred, gt, weights) * weights.aux
    return total


def _batched_set_loss(pred: DetectionSet, gts: list,
                      weights: LossWeights) -> Tensor:
    """Sum of per-image set losses, built as one batched graph. Matching is
    still independent per image (on detached values)."""
    n_batch, n_q = pred.logits.shape[0], pred.n_queries
    n_cls = pred.n_classes
    no_object = n_cls

    target = np.full((n_batch, n_q), no_object, dtype=np.int64)
    pair_img: list[int] = []
    pair_query: list[int] = []
    pair_boxes: list[np.ndarray] = []
    pair_scale: list[float] = []
    for b, gt in enumerate(gts):
        if len(gt) == 0:
            continue
        detached = DetectionSet(logits=Tensor(pred.logits.data[b]),
                                boxes=Tensor(pred.boxes.data[b]))
        match = hungarian_match(pairwise_cost(detached, gt, weights))
        inv_n = 1.0 / len(match.assignment)
        for g, q in match.assignment:
            target[b, q] = gt.class_ids[g]
            pair_img.append(b)
            pair_query.append(q)
            pair_boxes.append(gt.boxes[g])
            pair_scale.append(inv_n)

    onehot = np.zeros((n_batch, n_q, n_cls + 1))
    batch_idx = np.repeat(np.arange(n_batch), n_q)
    onehot[batch_idx, np.tile(np.arange(n_q), n_batch), target.reshape(-1)] = 1.0
    query_w = np.where(target == no_object, weights.no_object, 1.0)
    norm_w = query_w / query_w.sum(axis=1, keepdims=True)
    ce = -(pred.logits.log_softmax(axis=-1) * as_tensor(onehot)).sum(axis=-1)
    total = (ce * as_tensor(norm_w)).sum() * weights.cls

    if pair_img:
        key = (np.array(pair_img), np.array(pair_query))
        matched = pred.boxes[key]
        gt_boxes = as_tensor(np.stack(pair_boxes))
        scale = as_tensor(np.array(pair_scale))
        l1 = ((matched - gt_boxes).abs().sum(axis=-1) * scale).sum()
        giou_loss = ((1.0 - giou(matched, gt_boxes)) * scale).sum()
        total = total + l1 * weights.l1 + giou_loss * weights.giou
    return total


def detection_loss_batch(per_layer_preds: list, fused_pred: DetectionSet,
                         gts: list, weights: LossWeights = LossWeights()) -> Tensor:
    """Batched detection loss: mean over images of (fused + auxiliary) set
    losses. Equals averaging `detection_loss` over the images."""
    total = _batched_set_loss(fused_pred, gts, weights)
    for pred in per_layer_preds:
        total = total + _batched_set_loss(pred, gts, weights) * weights.aux
    return total * (1.0 / len(gts))
