"""Base/novel decoupled prompt: two independent attention branches blended
by a batch-composition-conditional weight.

The weight w selects how much of the base branch reaches the encoder:
all-base batches use w=1, all-novel use w=0, and mixed batches resolve w
per strategy (fixed constant, instance-count ratio, or a learned sigmoid
scalar). Both branches always run; w only scales their contributions, which
is what makes gradient isolation exact in the pure cases.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .nn import LayerNorm, Module, MultiHeadAttention
from .tensor import Tensor


class Phase(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class CompositionCase(enum.Enum):
    BASE_ONLY = "base_only"
    NOVEL_ONLY = "novel_only"
    MIXED = "mixed"


@dataclass(frozen=True)
class BatchComposition:
    """Instance counts of base and novel classes in one training batch."""

    n_base: int
    n_novel: int

    def __post_init__(self):
        if self.n_base < 0 or self.n_novel < 0:
            raise ValueError("instance counts must be non-negative")
        if self.n_base + self.n_novel < 1:
            raise ValueError("batch must contain at least one instance")

    @property
    def case(self) -> CompositionCase:
        if self.n_novel == 0:
            return CompositionCase.BASE_ONLY
        if self.n_base == 0:
            return CompositionCase.NOVEL_ONLY
        return CompositionCase.MIXED

    @staticmethod
    def from_labels(labels, base_classes) -> "BatchComposition":
        base_set = set(base_classes)
        n_base = sum(1 for c in labels if c in base_set)
        return BatchComposition(n_base, len(labels) - n_base)


class WeightKind(enum.Enum):
    HARD = "hard"
    SOFT = "soft"
    LEARNABLE = "learnable"


@dataclass
class PromptWeightStrategy:
    """How the mixing weight w is chosen for mixed batches and at eval.

    hard_value applies to mixed training batches under HARD; eval_value is
    the fixed evaluation weight for HARD and SOFT. LEARNABLE ignores both
    and reads sigmoid(w_logit) from the branch pair in both settings.
    """

    kind: WeightKind
    hard_value: float = 0.5
    eval_value: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.hard_value <= 1.0:
            raise ValueError(f"hard_value {self.hard_value} outside [0, 1]")
        if not 0.0 <= self.eval_value <= 1.0:
            raise ValueError(f"eval_value {self.eval_value} outside [0, 1]")


class PromptBranch(Module):
    """One self-attention block: attention + residual + normalisation."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d_model, n_heads, rng)
        self.norm = LayerNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(x + self.attn(x, x, x))


class PromptBranchPair(Module):
    """Two parameter-disjoint prompt branches plus the learnable-w logit."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.base_branch = PromptBranch(d_model, n_heads, rng)
        self.novel_branch = PromptBranch(d_model, n_heads, rng)
        # sigmoid(0) = 0.5: the learnable strategy starts unbiased
        self.w_logit = Tensor(np.zeros(()), requires_grad=True)

    def learnable_w(self) -> Tensor:
        return self.w_logit.sigmoid()


def resolve_w(strategy: PromptWeightStrategy, comp: BatchComposition | None,
              phase: Phase, pair: PromptBranchPair | None = None):
    """Mixing weight for one batch: a float, or a Tensor when learnable.

    Training requires a composition; evaluation ignores it (labels are
    unknown then, so the weight must be fixed or learned).
    """
    if strategy.kind is WeightKind.LEARNABLE:
        if pair is None:
            raise ValueError("learnable strategy needs the branch pair")
        if phase is Phase.EVAL:
            return pair.learnable_w()
    if phase is Phase.EVAL:
        return strategy.eval_value
    if comp is None:
        raise ValueError("training phase needs a batch composition")
    if comp.case is CompositionCase.BASE_ONLY:
        return 1.0
    if comp.case is CompositionCase.NOVEL_ONLY:
        return 0.0
    if strategy.kind is WeightKind.HARD:
        return strategy.hard_value
    if strategy.kind is WeightKind.SOFT:
        return comp.n_base / (comp.n_base + comp.n_novel)
    return pair.learnable_w()


def deprompt_forward(x: Tensor, pair: PromptBranchPair, w) -> Tensor:
    """w * base_branch(x) + (1 - w) * novel_branch(x); both branches run."""
    if isinstance(w, float) and not 0.0 <= w <= 1.0:
        raise ValueError(f"w {w} outside [0, 1]")
    base_out = pair.base_branch(x)
    novel_out = pair.novel_branch(x)
    return base_out * w + novel_out * (1.0 - w)


def single_branch_forward(x: Tensor, pair: PromptBranchPair,
                          which: str = "base") -> Tensor:
    """Run only one branch; reference path for inertness checks."""
    branch = pair.base_branch if which == "base" else pair.novel_branch
    return branch(x)
