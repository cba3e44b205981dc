"""Toy sequence autoencoder: variable-length motion in, fixed latent tokens out.

The encoder pools frames with learned attention queries; the decoder
rebuilds frames from a learned per-frame-index query table cross-attending
to the latent tokens.  Trained once with a reconstruction + small-KL
objective, then frozen: the diffusion model only ever sees posterior means
divided by a global scale calibrated so training latents have RMS around 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .layers import Linear, Module, sinusoidal_embedding
from .motion import FEATURES, JOINTS, MAX_FRAMES, MIN_FRAMES, MotionSequence
from .optim import AdamW
from .tensor import Tensor

FRAME_DIM = JOINTS * FEATURES  # 30


@dataclass
class LatentCode:
    """Fixed-size code for one sequence: (tokens, dim), unit-ish scale."""

    tokens: np.ndarray

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError("latent tokens must be (tokens, dim)")


def pack_batch(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad sequences into (Lmax, B, FRAME_DIM) plus a {0,1} mask (Lmax, B)."""
    lmax = max(s.frames for s in seqs)
    x = np.zeros((lmax, len(seqs), FRAME_DIM))
    mask = np.zeros((lmax, len(seqs)))
    for i, s in enumerate(seqs):
        x[: s.frames, i] = s.data.reshape(s.frames, FRAME_DIM)
        mask[: s.frames, i] = 1.0
    return x, mask


class MotionEncoder(Module):
    def __init__(self, latent_dim: int, hidden: int, tokens: int, rng):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.tokens = tokens
        self.in_proj = Linear(FRAME_DIM, hidden, rng)
        self.mlp = Linear(hidden, hidden, rng)
        self.queries = tt.tensor(
            rng.standard_normal((tokens, hidden)) / np.sqrt(hidden), requires_grad=True
        )
        self.key_proj = Linear(hidden, hidden, rng, bias=False)
        self.val_proj = Linear(hidden, hidden, rng, bias=False)
        self.mean_head = Linear(hidden, latent_dim, rng)
        self.logvar_head = Linear(hidden, latent_dim, rng)
        self.logvar_head.bias.assign_(np.full(latent_dim, -2.0))
        self.latent_scale = 1.0  # calibrated after training

    def posterior(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Attention-pool padded frames; returns mean and logvar, (K, B, d) each.

        x is (L, B, FRAME_DIM) zero-padded, mask is (L, B) with ones on real
        frames; padded positions are excluded via an additive score mask.
        """
        l = x.shape[0]
        pos = tt.tensor(sinusoidal_embedding(np.arange(l), self.hidden)[:, None, :])
        h = tt.silu(tt.add(self.in_proj(x), pos))
        h = tt.silu(self.mlp(h))
        keys = tt.transpose(self.key_proj(h), (1, 2, 0))  # (B, H, L)
        vals = tt.transpose(self.val_proj(h), (1, 0, 2))  # (B, L, H)
        scores = tt.scale(tt.matmul(self.queries, keys), self.hidden**-0.5)
        score_mask = tt.tensor((mask.T[:, None, :] - 1.0) * 1e9)
        attn = tt.softmax(tt.add(scores, score_mask), axis=-1)  # (B, K, L)
        pooled = tt.silu(tt.matmul(attn, vals))  # (B, K, H)
        mean = tt.transpose(self.mean_head(pooled), (1, 0, 2))
        logvar = tt.transpose(self.logvar_head(pooled), (1, 0, 2))
        return mean, logvar


class MotionDecoder(Module):
    def __init__(self, latent_dim: int, hidden: int, tokens: int, rng):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.tokens = tokens
        self.frame_queries = tt.tensor(
            rng.standard_normal((MAX_FRAMES, hidden)) / np.sqrt(hidden),
            requires_grad=True,
        )
        self.token_proj = Linear(latent_dim, hidden, rng)
        self.key_proj = Linear(hidden, hidden, rng, bias=False)
        self.val_proj = Linear(hidden, hidden, rng, bias=False)
        self.mlp = Linear(hidden, hidden, rng)
        self.out_proj = Linear(hidden, FRAME_DIM, rng)
        self.latent_scale = 1.0

    def frames(self, z: Tensor, length: int) -> Tensor:
        """Expand latent tokens (K, B, d) to (length, B, FRAME_DIM)."""
        if not 1 <= length <= MAX_FRAMES:
            raise ValueError(f"length {length} outside [1, {MAX_FRAMES}]")
        tok = tt.silu(self.token_proj(z))  # (K, B, H)
        keys = tt.transpose(self.key_proj(tok), (1, 2, 0))  # (B, H, K)
        vals = tt.transpose(self.val_proj(tok), (1, 0, 2))  # (B, K, H)
        q = tt.narrow(self.frame_queries, 0, 0, length)  # (length, H)
        scores = tt.scale(tt.matmul(q, keys), self.hidden**-0.5)  # (B, length, K)
        attn = tt.softmax(scores, axis=-1)
        h = tt.add(tt.matmul(attn, vals), q)  # (B, length, H)
        h = tt.silu(self.mlp(h))
        return tt.transpose(self.out_proj(h), (1, 0, 2))  # (length, B, FRAME_DIM)


def vae_encode(enc: MotionEncoder, seq: MotionSequence) -> LatentCode:
    """Posterior mean (no sampling), normalized by the calibrated scale."""
    return LatentCode(tokens=encode_batch(enc, [seq])[:, 0, :])


def encode_batch(enc: MotionEncoder, seqs) -> np.ndarray:
    x, mask = pack_batch(seqs)
    with tt.no_grad():
        mean, _ = enc.posterior(tt.tensor(x), mask)
    return mean.data / enc.latent_scale


def vae_decode(dec: MotionDecoder, code: LatentCode, length: int) -> MotionSequence:
    z = np.asarray(code.tokens)[:, None, :]
    return decode_batch(dec, z, [length])[0]


def decode_batch(dec: MotionDecoder, z: np.ndarray, lengths) -> list[MotionSequence]:
    """Decode scaled latents (K, B, d) to sequences of the requested lengths.

    Frames are generated independently given the latent, so decoding at the
    max length and slicing equals per-length decoding.  The returned
    sequences take their velocity channels from first differences of the
    decoded positions, which keeps the MotionSequence invariant exact.
    """
    lengths = list(lengths)
    if any(l < MIN_FRAMES or l > MAX_FRAMES for l in lengths):
        raise ValueError(f"lengths must lie in [{MIN_FRAMES}, {MAX_FRAMES}]")
    with tt.no_grad():
        frames = dec.frames(tt.tensor(z * dec.latent_scale), max(lengths)).data
    out = []
    for i, l in enumerate(lengths):
        flat = frames[:l, i].reshape(l, JOINTS, FEATURES)
        pos = flat[..., :3]
        vel = np.zeros_like(pos)
        vel[1:] = np.diff(pos, axis=0)
        out.append(MotionSequence(np.concatenate([pos, vel], axis=-1), label=-1))
    return out


def vae_train(
    dataset,
    epochs: int,
    kl_weight: float = 1e-4,
    seed: int = 0,
    latent_dim: int = 256,
    hidden: int = 64,
    tokens: int = 2,
    batch_size: int = 16,
    lr: float = 1e-3,
) -> tuple[MotionEncoder, MotionDecoder, dict]:
    """Joint reconstruction + KL training; returns frozen encoder/decoder.

    After the last epoch the global latent scale is set to the RMS of the
    training posterior means, so downstream consumers see unit-ish latents.
    """
    if not dataset:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    enc = MotionEncoder(latent_dim, hidden, tokens, rng)
    dec = MotionDecoder(latent_dim, hidden, tokens, rng)
    params = list(enc.named_params("enc")) + list(dec.named_params("dec"))
    opt = AdamW(params, lr=lr, weight_decay=1e-2)
    step_losses: list[float] = []
    epoch_losses: list[float] = []
    order = np.arange(len(dataset))
    for _ in range(epochs):
        rng.shuffle(order)
        epoch = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            seqs = [dataset[i] for i in idx]
            x, mask = pack_batch(seqs)
            eps = rng.standard_normal((tokens, len(seqs), latent_dim))
            loss = _vae_loss(enc, dec, x, mask, eps, kl_weight)
            tt.backward(loss)
            opt.step()
            opt.zero_grad()
            step_losses.append(loss.item())
            epoch.append(step_losses[-1])
        epoch_losses.append(float(np.mean(epoch)))
    means = []
    for start in range(0, len(dataset), 64):
        means.append(encode_batch(enc, dataset[start : start + 64]))
    latents = np.concatenate(means, axis=1)
    scale = float(np.sqrt((latents**2).mean()))
    enc.latent_scale = dec.latent_scale = max(scale, 1e-8)
    history = {"step": step_losses, "epoch": epoch_losses}
    return enc, dec, history


def _vae_loss(enc, dec, x, mask, eps, kl_weight) -> Tensor:
    xt = tt.tensor(x)
    mean, logvar = enc.posterior(xt, mask)
    std = tt.exp(tt.scale(logvar, 0.5))
    z = tt.add(mean, tt.mul(std, tt.tensor(eps)))
    recon = dec.frames(z, x.shape[0])
    diff = tt.mul(tt.sub(recon, xt), tt.tensor(mask[:, :, None]))
    denom = mask.sum() * FRAME_DIM
    rec_loss = tt.scale(tt.tsum(tt.mul(diff, diff)), 1.0 / denom)
    kl_terms = tt.sub(
        tt.add(tt.mul(mean, mean), tt.exp(logvar)),
        tt.add(logvar, tt.tensor(1.0)),
    )
    kl = tt.scale(tt.tsum(kl_terms), 0.5 / x.shape[1])
    return tt.add(rec_loss, tt.scale(kl, kl_weight))


def reconstruction_mse(enc, dec, seqs) -> float:
    """Mean squared round-trip error over all channels of the given sequences."""
    z = encode_batch(enc, seqs)
    decoded = decode_batch(dec, z, [s.frames for s in seqs])
    num = 0.0
    count = 0
    for s, d in zip(seqs, decoded):
        num += float(((s.data - d.data) ** 2).sum())
        count += s.data.size
    return num / count
