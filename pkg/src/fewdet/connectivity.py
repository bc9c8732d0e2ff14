"""Encoder-to-decoder connection operators and decoder-output fusion.

Three ways to feed the six decoder layers from the encoder:
  baseline       every decoder layer reads the last encoder memory
  learnable_skip decoder layer j reads a softmax-normalised mixture of all
                 six encoder layer memories (6x6 logit matrix, columns = j)
  soft_skip      decoder layer j reads a fixed two-term blend of the last
                 memory and its depth-mirrored partner (index 6 - j, where
                 index 0 is the encoder input embedding)

and two ways to produce the final decoder feature:
  last           the sixth decoder layer's output
  adaptive       softmax-normalised mixture of all six decoder outputs
                 (length-6 logit vector)

Every combination is convex: weights are non-negative and sum to one.
"""

from __future__ import annotations

import enum
from io import StringIO

import numpy as np

from .tensor import Tensor, as_tensor


N_LAYERS = 6


class SkipMode(enum.Enum):
    BASELINE = "baseline"
    LEARNABLE_SKIP = "learnable_skip"
    SOFT_SKIP = "soft_skip"


class FusionMode(enum.Enum):
    LAST = "last"
    ADAPTIVE = "adaptive"


def soft_skip_source(decoder_layer: int) -> int:
    """Encoder memory index paired with decoder layer j: i = 6 - j.

    Layers are 1-based; index 0 means the encoder input embedding.
    """
    if not 1 <= decoder_layer <= N_LAYERS:
        raise ValueError(f"decoder layer {decoder_layer} outside 1..{N_LAYERS}")
    return N_LAYERS - decoder_layer


def init_skip_logits() -> np.ndarray:
    """6x6 logits whose softmax columns start near one-hot on the last row,
    so training starts at the baseline connection."""
    logits = np.zeros((N_LAYERS, N_LAYERS))
    logits[N_LAYERS - 1, :] = 4.0
    return logits


def init_fusion_logits() -> np.ndarray:
    # equal logits: unbiased uniform fusion
    return np.zeros(N_LAYERS)


def memories_for_decoder(mode: SkipMode, memories: list, *,
                         skip_logits: Tensor | None = None,
                         a_scalar: float = 0.5) -> list:
    """Build the six decoder-layer input memories from the seven encoder
    memories (input embedding at index 0, then layer outputs 1..6)."""
    if len(memories) != N_LAYERS + 1:
        raise ValueError(f"need {N_LAYERS + 1} memories (input + 6 layers), got {len(memories)}")
    shape = memories[0].shape
    for i, m in enumerate(memories):
        if m.shape != shape:
            raise ValueError(f"memory {i} shape {m.shape} != {shape}")

    if mode is SkipMode.BASELINE:
        return [memories[N_LAYERS] for _ in range(N_LAYERS)]

    if mode is SkipMode.SOFT_SKIP:
        if not 0.0 <= a_scalar <= 1.0:
            raise ValueError(f"a_scalar {a_scalar} outside [0, 1]")
        last = memories[N_LAYERS]
        return [last * a_scalar + memories[soft_skip_source(j)] * (1.0 - a_scalar)
                for j in range(1, N_LAYERS + 1)]

    if skip_logits is None or skip_logits.shape != (N_LAYERS, N_LAYERS):
        raise ValueError("learnable_skip needs 6x6 skip logits")
    weights = skip_logits.softmax(axis=0)  # column j sums to 1 over encoder index i
    mixed = []
    for j in range(N_LAYERS):
        acc = memories[1] * weights[0, j]
        for i in range(1, N_LAYERS):
            acc = acc + memories[i + 1] * weights[i, j]
        mixed.append(acc)
    return mixed


def fuse_decoder_outputs(fusion: FusionMode, dec_outputs: list, *,
                         fusion_logits: Tensor | None = None) -> Tensor:
    """Collapse the six per-layer decoder outputs into the final feature."""
    if len(dec_outputs) != N_LAYERS:
        raise ValueError(f"need {N_LAYERS} decoder outputs, got {len(dec_outputs)}")
    shape = dec_outputs[0].shape
    for j, d in enumerate(dec_outputs):
        if d.shape != shape:
            raise ValueError(f"decoder output {j} shape {d.shape} != {shape}")

    if fusion is FusionMode.LAST:
        return dec_outputs[N_LAYERS - 1]

    if fusion_logits is None or fusion_logits.shape != (N_LAYERS,):
        raise ValueError("adaptive fusion needs length-6 fusion logits")
    weights = fusion_logits.softmax(axis=0)
    acc = dec_outputs[0] * weights[0]
    for j in range(1, N_LAYERS):
        acc = acc + dec_outputs[j] * weights[j]
    return acc


def extra_parameter_count(mode: SkipMode, fusion: FusionMode) -> int:
    """Learnable parameters added on top of the baseline connection."""
    extra = 0
    if mode is SkipMode.LEARNABLE_SKIP:
        extra += N_LAYERS * N_LAYERS
    if fusion is FusionMode.ADAPTIVE:
        extra += N_LAYERS
    return extra


def connection_report(mode: SkipMode, fusion: FusionMode, *,
                      skip_logits: Tensor | None = None,
                      fusion_logits: Tensor | None = None,
                      a_scalar: float = 0.5) -> str:
    """Human-readable table of the effective (normalised) connection weights."""
    out = StringIO()
    out.write(f"connection mode: {mode.value}   fusion: {fusion.value}\n")
    out.write(f"extra learnable parameters vs baseline: {extra_parameter_count(mode, fusion)}\n")
    if mode is SkipMode.SOFT_SKIP:
        out.write(f"blend scalar (last-layer share): {a_scalar:.4f}\n")
        for j in range(1, N_LAYERS + 1):
            out.write(f"  decoder {j}: {a_scalar:.4f} * memory[6] + "
                      f"{1.0 - a_scalar:.4f} * memory[{soft_skip_source(j)}]\n")
    if mode is SkipMode.LEARNABLE_SKIP and skip_logits is not None:
        weights = skip_logits.softmax(axis=0).numpy()
        out.write("memory mixture (rows: encoder layer 1..6, cols: decoder layer 1..6):\n")
        for i in range(N_LAYERS):
            out.write("  " + "  ".join(f"{weights[i, j]:.4f}" for j in range(N_LAYERS)) + "\n")
    if fusion is FusionMode.ADAPTIVE and fusion_logits is not None:
        weights = fusion_logits.softmax(axis=0).numpy()
        out.write("decoder fusion weights (layers 1..6): "
                  + "  ".join(f"{w:.4f}" for w in weights) + "\n")
    return out.getvalue()


def convexity_weights(mode: SkipMode, *, skip_logits: Tensor | None = None,
                      a_scalar: float = 0.5) -> np.ndarray:
    """Per-decoder-layer combination weights over the seven memories,
    for invariant checks: each row is non-negative and sums to one."""
    weights = np.zeros((N_LAYERS, N_LAYERS + 1))
    if mode is SkipMode.BASELINE:
        weights[:, N_LAYERS] = 1.0
    elif mode is SkipMode.SOFT_SKIP:
        for j in range(1, N_LAYERS + 1):
            weights[j - 1, N_LAYERS] += a_scalar
            weights[j - 1, soft_skip_source(j)] += 1.0 - a_scalar
    else:
        soft = as_tensor(skip_logits.data).softmax(axis=0).numpy()
        weights[:, 1:] = soft.T
    return weights
