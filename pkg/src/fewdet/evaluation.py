"""Detection evaluation: per-class average precision with all-point
interpolation, base/novel aggregates, and the per-decoder-layer probe.

Predictions are never score-thresholded for AP; every query contributes a
(label, score, box) detection, with score = best real-class probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Scene, ground_truth
from .prompts import Phase, resolve_w
from .set_loss import DetectionSet, box_cxcywh_to_xyxy
from .tensor import Tensor, as_tensor, no_grad


@dataclass
class Detection:
    scene_index: int
    class_id: int
    score: float
    box: np.ndarray  # (cx, cy, w, h)


@dataclass
class EvalReport:
    per_class_ap: dict                 # class_id -> AP at the IoU threshold
    base_ap: float
    novel_ap: float
    iou_threshold: float
    per_class_ap75: dict = field(default_factory=dict)
    novel_ap75: float = 0.0
    per_layer_novel_ap: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "base_ap": self.base_ap,
            "novel_ap": self.novel_ap,
            "iou_threshold": self.iou_threshold,
            "per_class_ap75": {str(k): v for k, v in self.per_class_ap75.items()},
            "novel_ap75": self.novel_ap75,
            "per_layer_novel_ap": list(self.per_layer_novel_ap),
            "metadata": self.metadata,
        }


def box_iou_xyxy(a: np.ndarray, b: np.ndarray) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def detections_from_set(pred: DetectionSet, scene_index: int) -> list:
    """One detection per query: argmax real class and its probability."""
    return _detections_from_arrays(pred.logits.data, pred.boxes.data, scene_index)


def _detections_from_arrays(logits: np.ndarray, boxes: np.ndarray,
                            scene_index: int) -> list:
    probs = as_tensor(logits).softmax(axis=-1).numpy()
    out = []
    for q in range(logits.shape[0]):
        label = int(np.argmax(probs[q, :-1]))
        out.append(Detection(scene_index=scene_index, class_id=label,
                             score=float(probs[q, label]), box=boxes[q].copy()))
    return out


def average_precision(detections: list, gt_by_scene: dict, class_id: int,
                      iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP for one class.

    Detections are ranked by descending score; each greedily claims the
    highest-IoU unmatched ground truth of its class in its scene. Ties in
    score break by detection list order (stable sort), ties in IoU by lowest
    ground-truth index.
    """
    gt_boxes = {}
    n_gt = 0
    for scene_index, gt in gt_by_scene.items():
        keep = np.nonzero(gt.class_ids == class_id)[0]
        gt_boxes[scene_index] = box_cxcywh_to_xyxy(gt.boxes[keep])
        n_gt += len(keep)
    if n_gt == 0:
        return 0.0

    dets = [d for d in detections if d.class_id == class_id]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    claimed: dict[int, set] = {}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        det = dets[i]
        candidates = gt_boxes.get(det.scene_index)
        if candidates is None or len(candidates) == 0:
            continue
        box = box_cxcywh_to_xyxy(det.box[None, :])[0]
        ious = np.array([box_iou_xyxy(box, g) for g in candidates])
        used = claimed.setdefault(det.scene_index, set())
        best, best_iou = -1, -1.0
        for g in range(len(candidates)):
            if g not in used and ious[g] > best_iou:
                best, best_iou = g, ious[g]
        if best >= 0 and best_iou >= iou_threshold:
            used.add(best)
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(dets) + 1) if len(dets) else np.zeros(0)
    return _integrate_pr(recall, precision)


def _integrate_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone (running-max-from-right) precision envelope."""
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, envelope):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return float(ap)


def collect_detections(model, scenes: list, *, strategy=None) -> tuple:
    """Forward every scene in eval mode; returns (detections, gt_by_scene,
    per-layer detections) with per-layer sets from the raw decoder outputs."""
    w = 0.5
    if strategy is not None and model.prompts is not None:
        w = resolve_w(strategy, None, Phase.EVAL, model.prompts)
        if isinstance(w, Tensor):
            w = float(w.data)
    detections: list[Detection] = []
    per_layer: list[list[Detection]] = [[] for _ in range(6)]
    gt_by_scene: dict[int, object] = {}
    chunk = 32
    with no_grad():
        for start in range(0, len(scenes), chunk):
            group = scenes[start:start + chunk]
            images = np.stack([s.image for s in group])
            result = model.forward(images, w=w, need_aux=True)
            for offset, scene in enumerate(group):
                index = start + offset
                detections.extend(_detections_from_arrays(
                    result.fused.logits.data[offset],
                    result.fused.boxes.data[offset], index))
                for j, pred in enumerate(result.per_layer):
                    per_layer[j].extend(_detections_from_arrays(
                        pred.logits.data[offset], pred.boxes.data[offset], index))
                gt_by_scene[index] = ground_truth(scene)
    return detections, gt_by_scene, per_layer


def evaluate_detections(detections: list, gt_by_scene: dict, base_classes,
                        novel_classes, iou_threshold: float = 0.5,
                        with_ap75: bool = False) -> EvalReport:
    all_classes = sorted(tuple(base_classes) + tuple(novel_classes))
    per_class = {c: average_precision(detections, gt_by_scene, c, iou_threshold)
                 for c in all_classes}
    base_ap = float(np.mean([per_class[c] for c in base_classes])) if base_classes else 0.0
    novel_ap = float(np.mean([per_class[c] for c in novel_classes])) if novel_classes else 0.0
    report = EvalReport(per_class_ap=per_class, base_ap=base_ap, novel_ap=novel_ap,
                        iou_threshold=iou_threshold)
    if with_ap75:
        report.per_class_ap75 = {
            c: average_precision(detections, gt_by_scene, c, 0.75) for c in all_classes}
        if novel_classes:
            report.novel_ap75 = float(np.mean(
                [report.per_class_ap75[c] for c in novel_classes]))
    return report


def evaluate_model(model, scenes: list, base_classes, novel_classes, *,
                   strategy=None, iou_threshold: float = 0.5,
                   with_ap75: bool = False, with_probe: bool = False) -> EvalReport:
    if not scenes:
        raise ValueError("empty test set")
    detections, gt_by_scene, per_layer = collect_detections(model, scenes,
                                                            strategy=strategy)
    report = evaluate_detections(detections, gt_by_scene, base_classes,
                                 novel_classes, iou_threshold, with_ap75)
    if with_probe:
        report.per_layer_novel_ap = [
            evaluate_detections(layer_dets, gt_by_scene, base_classes,
                                novel_classes, iou_threshold).novel_ap
            for layer_dets in per_layer]
    return report


def per_layer_probe(model, scenes: list, base_classes, novel_classes, *,
                    strategy=None) -> dict:
    """Novel-class AP of each raw decoder layer (fusion bypassed) plus the
    best layer index (1-based)."""
    report = evaluate_model(model, scenes, base_classes, novel_classes,
                            strategy=strategy, with_probe=True)
    vector = report.per_layer_novel_ap
    return {"per_layer_novel_ap": vector,
            "best_layer": int(np.argmax(vector)) + 1,
            "fused_novel_ap": report.novel_ap}
