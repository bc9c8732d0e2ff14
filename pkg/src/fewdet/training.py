"""Two-phase training loop: base pretraining with nothing frozen, then
few-shot fine-tuning with the patch-embedding backbone frozen.

Each step builds one graph over the whole batch (losses summed, then
averaged), runs a single backward, and applies Adam to the unfrozen
parameters. All shuffling comes from one seeded generator, so a run is a
pure function of (model init, data, plan).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from fnmatch import fnmatch
from pathlib import Path

import numpy as np

from .data import Scene, finetune_ground_truth, ground_truth
from .prompts import BatchComposition, Phase, PromptWeightStrategy, resolve_w
from .set_loss import GroundTruth, LossWeights, detection_loss_batch
from .tensor import NonFiniteError


class TrainPhase(enum.Enum):
    BASE_PRETRAIN = "base_pretrain"
    FINE_TUNE = "fine_tune"


@dataclass
class OptimizerSpec:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0   # global norm; <= 0 disables


@dataclass
class TrainPhasePlan:
    phase: TrainPhase
    epochs: int
    batch_size: int = 4
    freeze_patterns: tuple = ()
    seed: int = 0
    patience: int = 0            # epochs without improvement before stopping; 0 = off
    min_rel_improvement: float = 1e-3

    @staticmethod
    def pretrain(epochs: int, batch_size: int = 4, seed: int = 0,
                 patience: int = 0) -> "TrainPhasePlan":
        return TrainPhasePlan(TrainPhase.BASE_PRETRAIN, epochs, batch_size,
                              freeze_patterns=(), seed=seed, patience=patience)

    @staticmethod
    def finetune(epochs: int, batch_size: int = 4, seed: int = 0,
                 patience: int = 0) -> "TrainPhasePlan":
        return TrainPhasePlan(TrainPhase.FINE_TUNE, epochs, batch_size,
                              freeze_patterns=("patch_embed.*",), seed=seed,
                              patience=patience)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class Adam:
    """Plain Adam over named parameters; frozen names are never touched."""

    def __init__(self, named_params: list, spec: OptimizerSpec,
                 freeze_patterns: tuple = ()):
        self.spec = spec
        self.params = [(name, t) for name, t in named_params
                       if not any(fnmatch(name, p) for p in freeze_patterns)]
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        spec = self.spec
        if spec.grad_clip > 0:
            sq = sum(float((t.grad ** 2).sum()) for _, t in self.params
                     if t.grad is not None)
            norm = np.sqrt(sq)
            scale = spec.grad_clip / norm if norm > spec.grad_clip else 1.0
        else:
            scale = 1.0
        bias1 = 1.0 - spec.beta1 ** self.t
        bias2 = 1.0 - spec.beta2 ** self.t
        for name, tensor in self.params:
            g = tensor.grad
            if g is None:
                continue
            g = g * scale
            m = self.m[name] = spec.beta1 * self.m[name] + (1 - spec.beta1) * g
            v = self.v[name] = spec.beta2 * self.v[name] + (1 - spec.beta2) * g * g
            update = spec.lr * (m / bias1) / (np.sqrt(v / bias2) + spec.eps)
            tensor.data = tensor.data - update


@dataclass
class TrainResult:
    loss_curve: list                 # mean loss per epoch
    step_count: int
    stopped_early: bool
    final_loss: float


def batch_composition(gts: list, base_classes) -> BatchComposition | None:
    labels = [int(c) for gt in gts for c in gt.class_ids]
    if not labels:
        return None
    return BatchComposition.from_labels(labels, base_classes)


def _examples_for_phase(plan: TrainPhasePlan, sets, spec) -> list:
    """(image, GroundTruth) pairs for the phase."""
    if plan.phase is TrainPhase.BASE_PRETRAIN:
        return [(s.image, ground_truth(s, spec.novel_classes)) for s in sets.pretrain]
    return [(scene.image, finetune_ground_truth(scene, kept, spec.novel_classes))
            for scene, kept in sets.finetune]


def run_training(model, examples: list, plan: TrainPhasePlan, base_classes,
                 strategy: PromptWeightStrategy | None = None,
                 optimizer_spec: OptimizerSpec = OptimizerSpec(),
                 loss_weights: LossWeights = LossWeights(),
                 diagnostics_dir=None) -> TrainResult:
    """Optimize the model on (image, GroundTruth) examples.

    Frozen parameters are excluded from the optimizer entirely, so they stay
    bitwise identical. A non-finite loss aborts with a diagnostic snapshot.
    """
    if not examples:
        raise ValueError("no training examples")
    optimizer = Adam(list(model.named_parameters()), optimizer_spec,
                     plan.freeze_patterns)
    rng = np.random.default_rng(np.random.SeedSequence([plan.seed, 0xB0]))
    curve: list[float] = []
    best = np.inf
    stall = 0
    steps = 0
    stopped_early = False
    for epoch in range(plan.epochs):
        order = rng.permutation(len(examples))
        epoch_losses: list[float] = []
        for start in range(0, len(order), plan.batch_size):
            batch = [examples[i] for i in order[start:start + plan.batch_size]]
            gts = [gt for _, gt in batch]
            comp = batch_composition(gts, base_classes)
            w = 1.0
            if model.prompts is not None and strategy is not None and comp is not None:
                w = resolve_w(strategy, comp, Phase.TRAIN, model.prompts)
            try:
                images = np.stack([image for image, _ in batch])
                result = model.forward(images, w=w, training=True)
                loss = detection_loss_batch(result.per_layer, result.fused,
                                            gts, loss_weights)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteError("detection_loss")
                loss.backward()
            except NonFiniteError as exc:
                path = _write_diagnostics(diagnostics_dir, plan, epoch, steps, curve)
                raise TrainingDiverged(
                    f"non-finite value at epoch {epoch} step {steps}: {exc}",
                    path) from exc
            optimizer.step()
            epoch_losses.append(value)
            steps += 1
        mean_loss = float(np.mean(epoch_losses))
        curve.append(mean_loss)
        if plan.patience > 0:
            if mean_loss < best * (1.0 - plan.min_rel_improvement):
                best = mean_loss
                stall = 0
            else:
                stall += 1
                if stall >= plan.patience:
                    stopped_early = True
                    break
    return TrainResult(loss_curve=curve, step_count=steps,
                       stopped_early=stopped_early,
                       final_loss=curve[-1] if curve else np.nan)


def _write_diagnostics(diagnostics_dir, plan, epoch, step, curve):
    if diagnostics_dir is None:
        return None
    path = Path(diagnostics_dir) / "divergence_snapshot.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "phase": plan.phase.value, "epoch": epoch, "step": step,
        "loss_curve": curve}, indent=1))
    return path


def overfit_single_batch(model, examples: list, n_steps: int = 200,
                         strategy: PromptWeightStrategy | None = None,
                         optimizer_spec: OptimizerSpec | None = None,
                         base_classes=(), loss_weights: LossWeights = LossWeights()) -> list:
    """Repeat one fixed batch for n_steps; returns the per-step loss list."""
    if optimizer_spec is None:
        optimizer_spec = OptimizerSpec(lr=3e-3)
    optimizer = Adam(list(model.named_parameters()), optimizer_spec)
    gts = [gt for _, gt in examples]
    comp = batch_composition(gts, base_classes)
    images = np.stack([image for image, _ in examples])
    losses = []
    for _ in range(n_steps):
        w = 1.0
        if model.prompts is not None and strategy is not None and comp is not None:
            w = resolve_w(strategy, comp, Phase.TRAIN, model.prompts)
        result = model.forward(images, w=w, training=True)
        loss = detection_loss_batch(result.per_layer, result.fused, gts,
                                    loss_weights)
        losses.append(float(loss.data))
        loss.backward()
        optimizer.step()
    return losses
