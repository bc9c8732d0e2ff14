"""Synthetic shape-detection world and the few-shot episode protocol.

Classes are shape x fill composites (five shapes, solid/striped fills), so
same-shape different-fill pairs are deliberately confusable. Rendering is
pure numpy on a small grayscale canvas; every annotation box is computed
from the actually rendered pixels, so boxes are exact by construction.

Few-shot episodes partition the classes into base and novel, build a
pretraining set of all-base images, and sample the fine-tune set at the
instance level: exactly n instances per novel class, and n (balanced) or
base_multiplier * n (imbalanced) per base class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .set_loss import GroundTruth

SHAPES = ("square", "circle", "triangle", "diamond", "cross")
FILLS = ("solid", "striped")
CLASS_NAMES = tuple(f"{shape}_{fill}" for shape in SHAPES for fill in FILLS)

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SyntheticWorld:
    canvas: int = 64
    n_channels: int = 1
    min_half: int = 6          # object half-extent range in pixels
    max_half: int = 12
    max_objects: int = 5
    min_intensity: float = 0.7
    overlap_limit: float = 0.25
    placement_attempts: int = 40

    @property
    def n_classes(self) -> int:
        return len(CLASS_NAMES)


@dataclass
class Annotation:
    class_id: int
    box: np.ndarray  # (cx, cy, w, h) normalized to [0, 1]


@dataclass
class Scene:
    image: np.ndarray           # [canvas, canvas, 1] float64 in [0, 1]
    annotations: list


@dataclass
class Dataset:
    world: SyntheticWorld
    scenes: list
    seed: int

    def __len__(self) -> int:
        return len(self.scenes)


def _shape_mask(shape: str, half: int) -> np.ndarray:
    size = 2 * half + 1
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    if shape == "square":
        mask = (np.abs(yy) <= half) & (np.abs(xx) <= half)
    elif shape == "circle":
        mask = yy ** 2 + xx ** 2 <= half ** 2
    elif shape == "triangle":
        # upward triangle: width shrinks linearly toward the top row
        mask = np.abs(xx) <= (yy + half) / 2.0
    elif shape == "diamond":
        mask = np.abs(yy) + np.abs(xx) <= half
    elif shape == "cross":
        arm = max(1, half // 3)
        mask = (np.abs(xx) <= arm) | (np.abs(yy) <= arm)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return mask.astype(bool).reshape(size, size)


def _apply_fill(mask: np.ndarray, fill: str) -> np.ndarray:
    if fill == "solid":
        return mask
    if fill == "striped":
        rows = np.arange(mask.shape[0])[:, None]
        return mask & ((rows % 4) < 2)
    raise ValueError(f"unknown fill {fill!r}")


def render_object(class_id: int, half: int) -> np.ndarray:
    shape = SHAPES[class_id // len(FILLS)]
    fill = FILLS[class_id % len(FILLS)]
    return _apply_fill(_shape_mask(shape, half), fill)


def _boxes_overlap_too_much(box: np.ndarray, others: list, limit: float) -> bool:
    for other in others:
        ax0, ay0 = box[0] - box[2] / 2, box[1] - box[3] / 2
        ax1, ay1 = box[0] + box[2] / 2, box[1] + box[3] / 2
        bx0, by0 = other[0] - other[2] / 2, other[1] - other[3] / 2
        bx1, by1 = other[0] + other[2] / 2, other[1] + other[3] / 2
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = box[2] * box[3] + other[2] * other[3] - inter
        if union > 0 and inter / union > limit:
            return True
    return False


def render_scene(world: SyntheticWorld, rng: np.random.Generator) -> Scene:
    canvas = np.zeros((world.canvas, world.canvas), dtype=np.float64)
    n_objects = int(rng.integers(1, world.max_objects + 1))
    annotations = []
    for _ in range(n_objects):
        class_id = int(rng.integers(0, world.n_classes))
        for _attempt in range(world.placement_attempts):
            half = int(rng.integers(world.min_half, world.max_half + 1))
            cy = int(rng.integers(half, world.canvas - half))
            cx = int(rng.integers(half, world.canvas - half))
            stamp = render_object(class_id, half)
            ys, xs = np.nonzero(stamp)
            y0, y1 = cy - half + ys.min(), cy - half + ys.max()
            x0, x1 = cx - half + xs.min(), cx - half + xs.max()
            box = np.array([(x0 + x1 + 1) / 2 / world.canvas,
                            (y0 + y1 + 1) / 2 / world.canvas,
                            (x1 - x0 + 1) / world.canvas,
                            (y1 - y0 + 1) / world.canvas])
            if _boxes_overlap_too_much(box, [a.box for a in annotations],
                                       world.overlap_limit):
                continue
            intensity = rng.uniform(world.min_intensity, 1.0)
            region = canvas[cy - half:cy + half + 1, cx - half:cx + half + 1]
            np.maximum(region, stamp * intensity, out=region)
            annotations.append(Annotation(class_id=class_id, box=box))
            break
    return Scene(image=canvas[:, :, None], annotations=annotations)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    # per-scene generator so parallel generation stays deterministic
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate_dataset(world: SyntheticWorld, n_scenes: int, seed: int) -> Dataset:
    scenes = [render_scene(world, scene_rng(seed, i)) for i in range(n_scenes)]
    return Dataset(world=world, scenes=scenes, seed=seed)


def ground_truth(scene: Scene, novel_classes=()) -> GroundTruth:
    novel = set(novel_classes)
    ids = [a.class_id for a in scene.annotations]
    boxes = (np.stack([a.box for a in scene.annotations])
             if scene.annotations else np.zeros((0, 4)))
    tags = ["novel" if c in novel else "base" for c in ids]
    return GroundTruth(class_ids=np.array(ids, dtype=np.int64), boxes=boxes,
                       split_tags=tags)


# -- episodes -------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeSpec:
    base_classes: tuple = (0, 1, 2, 3, 4, 6, 8)
    novel_classes: tuple = (5, 7, 9)
    n_shot: int = 5
    base_multiplier: int = 10
    balanced: bool = False
    sampling_seed: int = 0

    def __post_init__(self):
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise ValueError(f"base and novel classes overlap: {sorted(overlap)}")
        if self.n_shot < 1:
            raise ValueError("n_shot must be >= 1")
        if self.base_multiplier < 1 or self.base_multiplier > 10:
            raise ValueError("base_multiplier must be in 1..10")

    def quota(self, class_id: int) -> int:
        if class_id in self.novel_classes:
            return self.n_shot
        if self.balanced:
            return self.n_shot
        return self.base_multiplier * self.n_shot

    @property
    def all_classes(self) -> tuple:
        return tuple(sorted(self.base_classes + self.novel_classes))


@dataclass
class FewShotSets:
    pretrain: list      # Scenes containing only base-class objects
    finetune: list      # (Scene, kept annotation indices) per sampled image
    test: list          # untouched test Scenes


def build_fewshot_sets(train: Dataset, test: Dataset, spec: EpisodeSpec) -> FewShotSets:
    """Derive episode sets from a generated dataset.

    Pretraining keeps images whose every object is a base class. The
    fine-tune set is sampled at the instance level to hit the per-class
    quotas exactly; instances sampled from the same image are grouped into
    one training example (other objects in that image are dropped from its
    supervision, mirroring the instance-level few-shot convention).
    """
    base_set = set(spec.base_classes)
    pretrain = [s for s in train.scenes
                if s.annotations and all(a.class_id in base_set for a in s.annotations)]

    by_class: dict[int, list] = {c: [] for c in spec.all_classes}
    for scene_idx, scene in enumerate(train.scenes):
        for ann_idx, ann in enumerate(scene.annotations):
            if ann.class_id in by_class:
                by_class[ann.class_id].append((scene_idx, ann_idx))

    rng = np.random.default_rng(np.random.SeedSequence([spec.sampling_seed, 0xF5]))
    picked: dict[int, list] = {}
    for class_id in spec.all_classes:
        pool = by_class[class_id]
        quota = spec.quota(class_id)
        if len(pool) < quota:
            raise ValueError(f"class {class_id}: need {quota} instances, "
                             f"dataset has {len(pool)}")
        order = rng.permutation(len(pool))[:quota]
        for k in sorted(order):
            scene_idx, ann_idx = pool[k]
            picked.setdefault(scene_idx, []).append(ann_idx)

    finetune = [(train.scenes[scene_idx], sorted(ann_idxs))
                for scene_idx, ann_idxs in sorted(picked.items())]
    return FewShotSets(pretrain=pretrain, finetune=finetune, test=list(test.scenes))


def finetune_ground_truth(scene: Scene, kept: list, novel_classes=()) -> GroundTruth:
    sub = Scene(image=scene.image,
                annotations=[scene.annotations[i] for i in kept])
    return ground_truth(sub, novel_classes)


def finetune_instance_counts(sets: FewShotSets) -> dict:
    counts: dict[int, int] = {}
    for scene, kept in sets.finetune:
        for i in kept:
            c = scene.annotations[i].class_id
            counts[c] = counts.get(c, 0) + 1
    return counts


# -- on-disk format ---------------------------------------------------------------


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """One .npz with the image stack plus a JSON manifest side by side."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.image for s in dataset.scenes])
    np.savez_compressed(path.with_suffix(".npz"), images=images)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": dataset.seed,
        "class_names": list(CLASS_NAMES),
        "world": {k: getattr(dataset.world, k) for k in
                  ("canvas", "n_channels", "min_half", "max_half", "max_objects",
                   "min_intensity", "overlap_limit", "placement_attempts")},
        "scenes": [[{"class_id": a.class_id, "box": [float(v) for v in a.box]}
                    for a in s.annotations] for s in dataset.scenes],
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest["format_version"] != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest['format_version']}")
    images = np.load(path.with_suffix(".npz"))["images"]
    world = SyntheticWorld(**manifest["world"])
    scenes = []
    for img, anns in zip(images, manifest["scenes"]):
        scenes.append(Scene(image=img, annotations=[
            Annotation(class_id=a["class_id"], box=np.array(a["box"])) for a in anns]))
    return Dataset(world=world, scenes=scenes, seed=manifest["seed"])
