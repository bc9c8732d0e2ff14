"""AP evaluation: hand-computed PR cases, the brute-force oracle, and the
per-layer probe."""

import numpy as np
import pytest

from oracles import brute_force_ap

from fewdet.data import SyntheticWorld, generate_dataset
from fewdet.evaluation import (Detection, average_precision, box_iou_xyxy,
                               evaluate_detections, evaluate_model)
from fewdet.model import ConnectivitySetup, ModelConfig, build_detector
from fewdet.set_loss import GroundTruth, box_cxcywh_to_xyxy


def det(scene, cid, score, box):
    return Detection(scene_index=scene, class_id=cid, score=score,
                     box=np.asarray(box, dtype=float))


def gt_of(ids, boxes):
    return GroundTruth(class_ids=np.asarray(ids), boxes=np.asarray(boxes))


def test_perfect_detector_gets_ap_one():
    gt = gt_of([0, 0], [[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    dets = [det(0, 0, 1.0, gt.boxes[0]), det(0, 0, 1.0, gt.boxes[1])]
    assert average_precision(dets, {0: gt}, 0) == 1.0


def test_silent_detector_gets_ap_zero():
    gt = gt_of([0], [[0.5, 0.5, 0.2, 0.2]])
    assert average_precision([], {0: gt}, 0) == 0.0


def test_hand_evaluated_pr_curve():
    # 2 ground truths; predictions TP(.9), FP(.8), TP(.7)
    # AP = 0.5 * 1.0 + 0.5 * (2/3) = 5/6
    gt = gt_of([0, 0], [[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2]])
    dets = [det(0, 0, 0.9, [0.25, 0.25, 0.2, 0.2]),
            det(0, 0, 0.8, [0.5, 0.5, 0.05, 0.05]),
            det(0, 0, 0.7, [0.75, 0.75, 0.2, 0.2])]
    assert average_precision(dets, {0: gt}, 0) == pytest.approx(5.0 / 6.0, abs=1e-12)


def test_prediction_claims_at_most_one_gt():
    gt = gt_of([0, 0], [[0.4, 0.4, 0.2, 0.2], [0.45, 0.45, 0.2, 0.2]])
    # one good detection cannot count twice
    dets = [det(0, 0, 0.9, [0.4, 0.4, 0.2, 0.2])]
    ap = average_precision(dets, {0: gt}, 0)
    assert ap == pytest.approx(0.5, abs=1e-12)


def test_iou_threshold_respected():
    gt = gt_of([0], [[0.5, 0.5, 0.2, 0.2]])
    shifted = [det(0, 0, 0.9, [0.58, 0.5, 0.2, 0.2])]  # IoU ~ 0.4
    assert average_precision(shifted, {0: gt}, 0, iou_threshold=0.5) == 0.0
    assert average_precision(shifted, {0: gt}, 0, iou_threshold=0.3) == 1.0


@pytest.mark.parametrize("seed", range(50))
def test_evaluator_equals_brute_force_on_random_scenes(seed):
    rng = np.random.default_rng(seed)
    n_scenes = int(rng.integers(1, 4))
    gt_by_scene = {}
    detections = []
    for s in range(n_scenes):
        n_gt = int(rng.integers(0, 5))
        gt_by_scene[s] = gt_of(rng.integers(0, 3, size=n_gt),
                               rng.uniform(0.2, 0.8, size=(n_gt, 4)) * [1, 1, 0.3, 0.3])
        for _ in range(int(rng.integers(0, 8))):
            if n_gt and rng.random() < 0.6:
                base = gt_by_scene[s].boxes[rng.integers(0, n_gt)]
                box = base + rng.normal(0, 0.03, size=4)
                box[2:] = np.abs(box[2:]) + 0.01
            else:
                box = rng.uniform(0.2, 0.8, size=4) * [1, 1, 0.3, 0.3] + [0, 0, 0.01, 0.01]
            detections.append(det(s, int(rng.integers(0, 3)),
                                  float(rng.random()), box))
    for class_id in range(3):
        fast = average_precision(detections, gt_by_scene, class_id)
        slow = brute_force_ap(detections, gt_by_scene, class_id)
        assert fast == slow, f"seed {seed} class {class_id}: {fast} vs {slow}"


def test_evaluate_detections_aggregates():
    gt_by_scene = {0: gt_of([0, 2], [[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])}
    dets = [det(0, 0, 0.9, [0.3, 0.3, 0.2, 0.2]),
            det(0, 2, 0.9, [0.7, 0.7, 0.2, 0.2])]
    report = evaluate_detections(dets, gt_by_scene, base_classes=(0, 1),
                                 novel_classes=(2,))
    assert report.per_class_ap[0] == 1.0
    assert report.per_class_ap[1] == 0.0  # no gt for class 1
    assert report.novel_ap == 1.0
    assert report.base_ap == 0.5


def test_probe_layer6_equals_fused_for_baseline_last():
    cfg = ModelConfig(d_model=32, n_heads=4, n_queries=8, ffn_dim=48,
                      patch_size=8, image_size=32, use_prompts=False)
    model = build_detector(cfg, ConnectivitySetup(), seed=0)
    world = SyntheticWorld(canvas=32, min_half=4, max_half=7, max_objects=2)
    scenes = generate_dataset(world, 6, seed=0).scenes
    report = evaluate_model(model, scenes, base_classes=(0, 1, 2, 3, 4, 6, 8),
                            novel_classes=(5, 7, 9), with_probe=True)
    assert len(report.per_layer_novel_ap) == 6
    assert report.per_layer_novel_ap[5] == report.novel_ap
    # untrained model detects nothing real
    assert report.novel_ap <= 0.2


def test_evaluate_model_rejects_empty_test_set():
    cfg = ModelConfig(d_model=32, n_heads=4, n_queries=8, ffn_dim=48,
                      patch_size=8, image_size=32, use_prompts=False)
    model = build_detector(cfg, ConnectivitySetup(), seed=0)
    with pytest.raises(ValueError):
        evaluate_model(model, [], base_classes=(0,), novel_classes=(1,))
