"""Noise-prediction network: symmetric encoder stack, attention mixer,
decoder stack with skip fusion.

Latent sequences are (tokens, batch, channels).  Each encoder/decoder layer
is a temporal scan block followed by a channel scan block; the number of
scans per temporal block follows the depth schedule (most scans farthest
from the bottleneck).  The timestep enters additively at the input, the
condition enters once, as the cross-attention context of the mixer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .blocks import ChannelScanBlock, TemporalScanBlock, build_scan_schedule
from .layers import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    sinusoidal_embedding,
)
from .tensor import Tensor


@dataclass
class DenoiserConfig:
    depth: int = 5  # encoder/decoder pairs; total layers = 2 * depth + 1
    latent_channels: int = 256
    latent_tokens: int = 2
    expand: int = 1  # inner width / channels in the temporal blocks
    state_dim: int = 16
    conv_width: int = 4
    condition_dim: int = 64
    timestep_embed_dim: int = 128
    heads: int = 4
    max_timesteps: int = 1000
    zero_init: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.latent_channels % self.heads != 0:
            raise ValueError("latent_channels must be divisible by heads")

    @property
    def total_layers(self) -> int:
        return 2 * self.depth + 1


class Mixer(Module):
    """Token self-attention, cross-attention to the condition, feed-forward."""

    def __init__(self, width: int, heads: int, rng):
        self.norm_self = LayerNorm(width)
        self.self_attn = MultiHeadAttention(width, heads, rng)
        self.norm_cross = LayerNorm(width)
        self.cross_attn = MultiHeadAttention(width, heads, rng)
        self.norm_ffn = LayerNorm(width)
        self.ffn = FeedForward(width, rng)

    def __call__(self, tokens: Tensor, context: Tensor) -> Tensor:
        x = tt.add(tokens, self.self_attn(self.norm_self(tokens)))
        x = tt.add(x, self.cross_attn(self.norm_cross(x), context=context))
        return tt.add(x, self.ffn(self.norm_ffn(x)))


class _Layer(Module):
    def __init__(self, cfg: DenoiserConfig, scans: int, rng, name: str):
        self.temporal = TemporalScanBlock(
            cfg.latent_channels, scans, rng, expand=cfg.expand,
            state_dim=cfg.state_dim, conv_width=cfg.conv_width,
            zero_init_out=cfg.zero_init, name=f"{name}.temporal",
        )
        self.channel = ChannelScanBlock(
            cfg.latent_channels, cfg.latent_tokens, rng,
            state_dim=cfg.state_dim, conv_width=cfg.conv_width,
            zero_init_out=cfg.zero_init, name=f"{name}.channel",
        )

    def __call__(self, z: Tensor) -> Tensor:
        return self.channel(self.temporal(z))


class Denoiser(Module):
    """Predicts the injected noise for a batch of latent sequences."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.latent_channels
        schedule = build_scan_schedule(cfg.depth)
        self.schedule = schedule
        self.t_mlp1 = Linear(cfg.timestep_embed_dim, cfg.timestep_embed_dim, rng)
        self.t_mlp2 = Linear(cfg.timestep_embed_dim, cfg.timestep_embed_dim, rng)
        self.t_inject = Linear(cfg.timestep_embed_dim, c, rng)
        self.cond_proj = Linear(cfg.condition_dim, c, rng)
        self.encoders = [
            _Layer(cfg, schedule.encoder_scans[i], rng, f"enc{i}")
            for i in range(cfg.depth)
        ]
        self.mixer = Mixer(c, cfg.heads, rng)
        self.fusions = [
            Linear(2 * c, c, rng) for _ in range(cfg.depth)
        ]
        self.decoders = [
            _Layer(cfg, schedule.decoder_scans[j], rng, f"dec{j}")
            for j in range(cfg.depth)
        ]
        self.head = Linear(c, c, rng, bias=False, zero_init=cfg.zero_init)

    def timestep_embed(self, t) -> Tensor:
        """Sinusoidal features of the integer timestep, refined by a 2-layer MLP."""
        t = np.atleast_1d(np.asarray(t))
        if np.any(t < 0) or np.any(t >= self.cfg.max_timesteps):
            raise ValueError(
                f"timestep out of range [0, {self.cfg.max_timesteps}): {t}"
            )
        base = tt.tensor(sinusoidal_embedding(t, self.cfg.timestep_embed_dim))
        return self.t_mlp2(tt.silu(self.t_mlp1(base)))

    def __call__(self, z_t: Tensor, t, cond: Tensor) -> Tensor:
        cfg = self.cfg
        if not isinstance(z_t, Tensor):
            z_t = tt.tensor(z_t)
        if z_t.shape[0] != cfg.latent_tokens or z_t.shape[2] != cfg.latent_channels:
            raise tt.ShapeError(
                f"latent must be ({cfg.latent_tokens}, B, {cfg.latent_channels}),"
                f" got {z_t.shape}"
            )
        if cond.shape != (z_t.shape[1], cfg.condition_dim):
            raise tt.ShapeError(
                f"cond must be (B, {cfg.condition_dim}), got {cond.shape}"
            )
        temb = self.t_inject(self.timestep_embed(t))  # (B, C)
        b = z_t.shape[1]
        z = tt.add(z_t, tt.reshape(temb, (1, b, cfg.latent_channels)))

        skips = []
        for layer in self.encoders:
            z = layer(z)
            skips.append(z)

        context = tt.reshape(self.cond_proj(cond), (1, b, cfg.latent_channels))
        z = self.mixer(z, context)

        for j, layer in enumerate(self.decoders):
            skip = skips[cfg.depth - 1 - j]
            z = self.fusions[j](tt.concat([skip, z], axis=2))
            z = layer(z)
        return self.head(z)
