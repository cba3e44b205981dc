"""Small parameterized layers shared by the blocks, denoiser and VAE.

Modules follow one convention: construction takes an ``np.random.Generator``,
parameters are ``Tensor`` leaves with ``requires_grad=True``, and
``named_params()`` yields ``(name, Tensor)`` pairs in a stable order (the
checkpoint format keys payloads by these names).
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import Tensor


class Module:
    """Parameter container; subclasses register tensors via attributes."""

    def named_params(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_params(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def params(self):
        return [p for _, p in self.named_params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, scale=1.0):
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True, zero_init=False, scale=1.0):
        if zero_init:
            w = np.zeros((fan_in, fan_out))
        else:
            w = init_weight(rng, fan_in, fan_out, scale)
        self.weight = tt.tensor(w, requires_grad=True)
        self.bias = tt.tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = tt.matmul(x, self.weight)
        if self.bias is not None:
            y = tt.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gain = tt.tensor(np.ones(width), requires_grad=True)
        self.bias = tt.tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tt.layernorm(x, self.gain, self.bias)


def split_last(x: Tensor, sizes: tuple[int, ...]) -> list[Tensor]:
    parts, offset = [], 0
    for s in sizes:
        parts.append(tt.narrow(x, -1, offset, offset + s))
        offset += s
    return parts


class MultiHeadAttention(Module):
    """Attention over the leading (token) axis of (T, B, C) sequences.

    Keys and values may come from a different source sequence (cross
    attention).  ``return_weights`` exposes the softmax rows for tests.
    """

    def __init__(self, width: int, heads: int, rng):
        if width % heads != 0:
            raise ValueError(f"width {width} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)

    def _split_heads(self, x: Tensor) -> Tensor:
        t, b, c = x.shape
        x = tt.reshape(x, (t, b, self.heads, self.head_dim))
        return tt.transpose(x, (1, 2, 0, 3))  # (B, H, T, dh)

    def __call__(self, x: Tensor, context: Tensor | None = None, return_weights=False):
        ctx = x if context is None else context
        q = self._split_heads(self.wq(x))
        k = self._split_heads(self.wk(ctx))
        v = self._split_heads(self.wv(ctx))
        scores = tt.scale(
            tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), self.head_dim**-0.5
        )
        weights = tt.softmax(scores, axis=-1)  # (B, H, Tq, Tk)
        mixed = tt.matmul(weights, v)  # (B, H, Tq, dh)
        t_q = x.shape[0]
        mixed = tt.transpose(mixed, (2, 0, 1, 3))
        mixed = tt.reshape(mixed, (t_q, x.shape[1], self.heads * self.head_dim))
        out = self.wo(mixed)
        if return_weights:
            return out, weights
        return out


class FeedForward(Module):
    """Position-wise 4x expansion MLP."""

    def __init__(self, width: int, rng, multiplier: int = 4):
        self.up = Linear(width, multiplier * width, rng)
        self.down = Linear(multiplier * width, width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(tt.silu(self.up(x)))


class TransformerBlock(Module):
    """Pre-norm encoder block: self-attention + 4x feed-forward, residuals.

    Used as the attention baseline in the scaling benchmark and the
    parameter-count comparison.
    """

    def __init__(self, width: int, heads: int, rng):
        self.norm1 = LayerNorm(width)
        self.attn = MultiHeadAttention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.ffn = FeedForward(width, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = tt.add(x, self.attn(self.norm1(x)))
        return tt.add(x, self.ffn(self.norm2(x)))


def sinusoidal_embedding(positions: np.ndarray, dim: int, max_period=10000.0):
    """Fixed sin/cos features at geometric frequencies; returns (len, dim)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    args = positions[:, None] * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb
