"""Set-prediction detector skeleton: patch-embedding backbone, fixed 2D
sinusoidal positions, six encoder and six decoder layers with learned object
queries, and the two prediction heads.

The encoder exposes all per-layer memories and the decoder all per-layer
outputs, because the connection operators and the output fusion both need
the full ladders, not just the final features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import connectivity as conn
from .nn import FeedForward, LayerNorm, Linear, MLP, Module, MultiHeadAttention
from .prompts import PromptBranchPair, deprompt_forward, single_branch_forward
from .set_loss import DetectionSet
from .tensor import Tensor


N_ENC_LAYERS = 6
N_DEC_LAYERS = 6


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_queries: int = 16
    ffn_dim: int = 128
    n_classes: int = 10
    patch_size: int = 8
    image_size: int = 64
    n_channels: int = 1
    use_prompts: bool = True
    p_dropout: float = 0.0

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 4 != 0:
            raise ValueError("d_model must be divisible by 4 for 2D sinusoidal positions")
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 <= self.p_dropout < 1.0:
            raise ValueError("p_dropout must be in [0, 1)")


@dataclass
class ConnectivitySetup:
    mode: conn.SkipMode = conn.SkipMode.BASELINE
    fusion: conn.FusionMode = conn.FusionMode.LAST
    a_scalar: float = 0.5


def sinusoidal_position_table(grid_h: int, grid_w: int, d_model: int) -> np.ndarray:
    """Fixed 2D sine/cosine table, flattened row-major to [grid_h*grid_w, d_model].

    Half the channels encode the row index, half the column index; within a
    half, (sin, cos) pairs share a frequency so every position has the same
    norm. Deterministic in its arguments.
    """
    half = d_model // 2
    n_pairs = half // 2
    freqs = 1.0 / (10000.0 ** (np.arange(n_pairs) / n_pairs))
    table = np.zeros((grid_h, grid_w, d_model))
    rows = np.arange(grid_h)[:, None] * freqs[None, :]   # [gh, pairs]
    cols = np.arange(grid_w)[:, None] * freqs[None, :]
    table[:, :, 0:half:2] = np.sin(rows)[:, None, :]
    table[:, :, 1:half:2] = np.cos(rows)[:, None, :]
    table[:, :, half::2] = np.sin(cols)[None, :, :]
    table[:, :, half + 1::2] = np.cos(cols)[None, :, :]
    return table.reshape(grid_h * grid_w, d_model)


class PatchEmbed(Module):
    """Single linear map from flattened patches to d_model tokens."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.n_channels = cfg.n_channels
        self.proj = Linear(cfg.patch_size ** 2 * cfg.n_channels, cfg.d_model, rng)

    def __call__(self, image: np.ndarray) -> Tensor:
        """[H, W, C] -> [T, d_model], or [B, H, W, C] -> [B, T, d_model]."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[:, :, None]
        batched = image.ndim == 4
        if not batched:
            image = image[None]
        n, h, w, c = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        if c != self.n_channels:
            raise ValueError(f"expected {self.n_channels} channels, got {c}")
        patches = image.reshape(n, h // p, p, w // p, p, c)
        patches = patches.transpose(0, 1, 3, 2, 4, 5).reshape(
            n, (h // p) * (w // p), p * p * c)
        if not batched:
            patches = patches[0]
        return self.proj(Tensor(patches))


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.p_dropout)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, rng, cfg.p_dropout)
        self.norm2 = LayerNorm(cfg.d_model)

    def __call__(self, src: Tensor, pos: Tensor, rng=None, training=False) -> Tensor:
        q = src + pos
        src = self.norm1(src + self.self_attn(q, q, src, rng, training))
        return self.norm2(src + self.ffn(src, rng, training))


class EncoderStack(Module):
    """Six encoder layers; returns all seven memories, input embedding first."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.layers = [EncoderLayer(cfg, rng) for _ in range(N_ENC_LAYERS)]

    def __call__(self, input_embedding: Tensor, pos: Tensor,
                 rng=None, training=False) -> list:
        memories = [input_embedding]
        x = input_embedding
        for layer in self.layers:
            x = layer(x, pos, rng, training)
            memories.append(x)
        return memories


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.p_dropout)
        self.norm1 = LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, cfg.p_dropout)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, rng, cfg.p_dropout)
        self.norm3 = LayerNorm(cfg.d_model)

    def __call__(self, tgt: Tensor, query_pos: Tensor, memory: Tensor,
                 mem_pos: Tensor, rng=None, training=False) -> Tensor:
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt, rng, training))
        tgt = self.norm2(tgt + self.cross_attn(
            tgt + query_pos, memory + mem_pos, memory, rng, training))
        return self.norm3(tgt + self.ffn(tgt, rng, training))


class DecoderStack(Module):
    """Six decoder layers over learned queries; layer j cross-attends to the
    j-th supplied memory (whatever the connection operator put there)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.layers = [DecoderLayer(cfg, rng) for _ in range(N_DEC_LAYERS)]
        self.query_embed = Tensor(rng.normal(0.0, 1.0, (cfg.n_queries, cfg.d_model)),
                                  requires_grad=True)

    def __call__(self, memories: list, mem_pos: Tensor,
                 rng=None, training=False) -> list:
        if len(memories) != N_DEC_LAYERS:
            raise ValueError(f"need {N_DEC_LAYERS} decoder-layer memories, got {len(memories)}")
        lead = memories[0].shape[:-2]
        tgt = Tensor(np.zeros(lead + self.query_embed.shape))
        outputs = []
        for layer, memory in zip(self.layers, memories):
            tgt = layer(tgt, self.query_embed, memory, mem_pos, rng, training)
            outputs.append(tgt)
        return outputs


class PredictionHeads(Module):
    """Classification and box heads; boxes go through sigmoid into [0, 1]."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.class_mlp = MLP(cfg.d_model, cfg.d_model, cfg.n_classes + 1, 2, rng)
        self.box_mlp = MLP(cfg.d_model, cfg.d_model, 4, 3, rng)

    def __call__(self, features: Tensor, provenance: str = "") -> DetectionSet:
        return DetectionSet(logits=self.class_mlp(features),
                            boxes=self.box_mlp(features).sigmoid(),
                            provenance=provenance)


@dataclass
class ForwardResult:
    memories: list            # 7 tensors: input embedding + 6 encoder layers
    dec_outputs: list         # 6 tensors, one per decoder layer
    fused_features: Tensor
    fused: DetectionSet
    per_layer: list = field(default_factory=list)  # 6 DetectionSets when requested


class Detector(Module):
    """Full pipeline: patches -> (optional prompts) -> encoder -> connection
    operator -> decoder -> fusion -> heads."""

    def __init__(self, cfg: ModelConfig, setup: ConnectivitySetup,
                 rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.setup = setup
        self.patch_embed = PatchEmbed(cfg, rng)
        grid = cfg.image_size // cfg.patch_size
        self._pos_table = sinusoidal_position_table(grid, grid, cfg.d_model)
        self.prompts = PromptBranchPair(cfg.d_model, cfg.n_heads, rng) if cfg.use_prompts else None
        self.encoder = EncoderStack(cfg, rng)
        self.decoder = DecoderStack(cfg, rng)
        self.heads = PredictionHeads(cfg, rng)
        # connection parameters always exist so mode switches share weights;
        # unused modes simply never route gradient into them
        self.skip_logits = Tensor(conn.init_skip_logits(), requires_grad=True)
        self.fusion_logits = Tensor(conn.init_fusion_logits(), requires_grad=True)

    def position_embedding(self) -> Tensor:
        return Tensor(self._pos_table)

    def embed_image(self, image: np.ndarray) -> tuple:
        tokens = self.patch_embed(image)
        pos = self.position_embedding()
        if tokens.shape[-2:] != pos.shape:
            raise ValueError(f"token grid {tokens.shape} does not match "
                             f"position table {pos.shape}")
        return tokens, pos

    def encode(self, tokens: Tensor, pos: Tensor, rng=None, training=False) -> list:
        """All seven memories; [0] is the input embedding tokens + pos."""
        return self.encoder(tokens + pos, pos, rng, training)

    def forward(self, image: np.ndarray, *, w=1.0, prompt_mode: str = "pair",
                need_aux: bool = True, rng=None, training: bool = False) -> ForwardResult:
        """Run the detector on one image.

        `w` is the prompt mixing weight for this batch (float or scalar
        Tensor); ignored when prompts are disabled. `prompt_mode` selects the
        normal two-branch blend or a single branch (reference path).
        """
        tokens, pos = self.embed_image(image)
        if self.prompts is not None:
            x = tokens + pos
            if prompt_mode == "pair":
                tokens = deprompt_forward(x, self.prompts, w)
            else:
                tokens = single_branch_forward(x, self.prompts, prompt_mode)
        memories = self.encode(tokens, pos, rng, training)
        dec_memories = conn.memories_for_decoder(
            self.setup.mode, memories,
            skip_logits=self.skip_logits, a_scalar=self.setup.a_scalar)
        dec_outputs = self.decoder(dec_memories, pos, rng, training)
        fused_features = conn.fuse_decoder_outputs(
            self.setup.fusion, dec_outputs, fusion_logits=self.fusion_logits)
        fused = self.heads(fused_features, provenance="fused")
        per_layer = []
        if need_aux:
            per_layer = [self.heads(out, provenance=f"layer{j + 1}")
                         for j, out in enumerate(dec_outputs)]
        return ForwardResult(memories=memories, dec_outputs=dec_outputs,
                             fused_features=fused_features, fused=fused,
                             per_layer=per_layer)

    def connection_report(self) -> str:
        return conn.connection_report(
            self.setup.mode, self.setup.fusion,
            skip_logits=self.skip_logits, fusion_logits=self.fusion_logits,
            a_scalar=self.setup.a_scalar)


def build_detector(cfg: ModelConfig, setup: ConnectivitySetup, seed: int) -> Detector:
    return Detector(cfg, setup, np.random.default_rng(np.random.SeedSequence([seed, 0x0D])))
