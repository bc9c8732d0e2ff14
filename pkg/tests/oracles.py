"""Independent reference implementations used only by tests: exhaustive
assignment enumeration and a quadratic-rescan AP evaluator. Deliberately
naive, sharing no code with the library paths they check."""

import itertools

import numpy as np

from fewdet.evaluation import box_iou_xyxy
from fewdet.set_loss import box_cxcywh_to_xyxy


def exhaustive_min_cost(cost: np.ndarray) -> float:
    """Minimum assignment cost by enumerating every injection."""
    n_gt, n_q = cost.shape
    best = np.inf
    for perm in itertools.permutations(range(n_q), n_gt):
        best = min(best, sum(cost[g, q] for g, q in enumerate(perm)))
    return best


def exhaustive_lex_optimal(cost: np.ndarray, tol: float = 1e-9) -> tuple:
    """Lexicographically smallest optimal query sequence."""
    best = exhaustive_min_cost(cost)
    return min(perm for perm in itertools.permutations(range(cost.shape[1]),
                                                       cost.shape[0])
               if sum(cost[g, q] for g, q in enumerate(perm)) <= best + tol)


def brute_force_ap(detections, gt_by_scene, class_id, thr=0.5):
    """All-point AP recomputed from scratch at every score cutoff."""
    gts = {}
    n_gt = 0
    for scene_index, gt in gt_by_scene.items():
        keep = [i for i in range(len(gt)) if gt.class_ids[i] == class_id]
        gts[scene_index] = box_cxcywh_to_xyxy(gt.boxes[keep])
        n_gt += len(keep)
    if n_gt == 0:
        return 0.0
    dets = [d for d in detections if d.class_id == class_id]
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)

    def matched_count(cutoff):
        used = {k: set() for k in gts}
        count = 0
        for i in order[:cutoff]:
            d = dets[i]
            box = box_cxcywh_to_xyxy(d.box[None, :])[0]
            best, best_iou = -1, -1.0
            for g, gbox in enumerate(gts.get(d.scene_index, [])):
                if g in used[d.scene_index]:
                    continue
                iou = box_iou_xyxy(box, gbox)
                if iou > best_iou:
                    best, best_iou = g, iou
            if best >= 0 and best_iou >= thr:
                used[d.scene_index].add(best)
                count += 1
        return count

    recalls, precisions = [], []
    for cutoff in range(1, len(dets) + 1):
        tp = matched_count(cutoff)
        recalls.append(tp / n_gt)
        precisions.append(tp / cutoff)
    envelope = np.maximum.accumulate(np.array(precisions)[::-1])[::-1]
    ap, prev = 0.0, 0.0
    for r, p in zip(recalls, envelope):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)
