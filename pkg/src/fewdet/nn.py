"""Parameterised building blocks on top of the autodiff tensor.

A deliberately small Module system: parameters are Tensor attributes with
requires_grad=True, submodules are Module attributes (or lists of them), and
`named_parameters` walks them in attribute insertion order so checkpointing
and freezing are deterministic.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, dropout


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    # fan-average uniform (Glorot) for linear maps
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing}, unexpected={extra}")
        for name, tensor in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.copy()


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(uniform_init(rng, in_dim, out_dim, (in_dim, out_dim)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Stack of Linear layers with ReLU between them."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, n_layers: int,
                 rng: np.random.Generator):
        dims = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(n_layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class LayerNorm(Module):
    """Normalise the last dimension to mean 0 / variance 1, then affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return x.layer_norm(self.eps) * self.gain + self.shift


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention with separate q/k/v/out maps."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator,
                 attn_dropout: float = 0.0):
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng)
        self.k_proj = Linear(d_model, d_model, rng)
        self.v_proj = Linear(d_model, d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)
        self.attn_dropout = attn_dropout

    def _split(self, x: Tensor, lead: tuple, n_tokens: int) -> Tensor:
        # [..., T, d_model] -> [..., heads, T, d_head]
        n = len(lead)
        perm = tuple(range(n)) + (n + 1, n, n + 2)
        return x.reshape(lead + (n_tokens, self.n_heads, self.d_head)).transpose(perm)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        # attention never crosses leading (batch) dims
        lead = query.shape[:-2]
        tq, tk = query.shape[-2], key.shape[-2]
        n = len(lead)
        q = self._split(self.q_proj(query), lead, tq)
        k = self._split(self.k_proj(key), lead, tk)
        v = self._split(self.v_proj(value), lead, tk)
        swap_last = tuple(range(n + 1)) + (n + 2, n + 1)
        scores = (q @ k.transpose(swap_last)) * (1.0 / np.sqrt(self.d_head))
        attn = scores.softmax(axis=-1)
        attn = dropout(attn, self.attn_dropout, rng, training)
        unsplit = tuple(range(n)) + (n + 1, n, n + 2)
        mixed = (attn @ v).transpose(unsplit).reshape(
            lead + (tq, self.n_heads * self.d_head))
        return self.out_proj(mixed)


class FeedForward(Module):
    def __init__(self, d_model: int, ffn_dim: int, rng: np.random.Generator,
                 p_dropout: float = 0.0):
        self.fc1 = Linear(d_model, ffn_dim, rng)
        self.fc2 = Linear(ffn_dim, d_model, rng)
        self.p_dropout = p_dropout

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None,
                 training: bool = False) -> Tensor:
        return self.fc2(dropout(self.fc1(x).relu(), self.p_dropout, rng, training))
