"""Desk-scale few-shot set-prediction detector.

Core pieces: a minimal reverse-mode autodiff tensor (`tensor`), transformer
building blocks (`nn`, `model`), base/novel decoupled prompts (`prompts`),
encoder-decoder connection operators and output fusion (`connectivity`),
the bipartite-matching loss (`set_loss`), a synthetic few-shot protocol
(`data`, `training`, `evaluation`), and an experiment CLI (`cli`).
"""

from .tensor import Tensor, finite_difference_check

__all__ = ["Tensor", "finite_difference_check"]
__version__ = "0.1.0"
