"""The two scan blocks and the depth-dependent scan schedule.

``TemporalScanBlock`` runs k parallel selective scans over the token/time
axis (k set per layer by the schedule, each scan with its own state matrix
and projections) and aggregates them.  ``ChannelScanBlock`` swaps the token
and channel axes and scans the channel sequence in both directions with
independent parameters.  Both are residual and shape-preserving on
(T, B, C) input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ssm
from . import tensor as tt
from .layers import LayerNorm, Linear, Module, split_last
from .tensor import Tensor


@dataclass
class ScanSchedule:
    """Descending odd scan counts, mirrored between encoder and decoder."""

    depth: int
    encoder_scans: list[int]
    decoder_scans: list[int]

    def __post_init__(self):
        n = self.depth
        if len(self.encoder_scans) != n or len(self.decoder_scans) != n:
            raise ValueError("schedule lists must have one entry per layer")
        if any(k < 1 or k % 2 == 0 for k in self.encoder_scans + self.decoder_scans):
            raise ValueError("scan counts must be odd and >= 1")
        if self.decoder_scans != self.encoder_scans[::-1]:
            raise ValueError("decoder scans must mirror encoder scans")


def build_scan_schedule(depth: int) -> ScanSchedule:
    """Encoder layers get {2N-1, 2N-3, ..., 1}; decoder layers the reverse.

    Scan counts descend toward the bottleneck on both sides, so the layer
    executed right after the mixer gets 1 scan and the output layer 2N-1.
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    encoder = [2 * (depth - i) - 1 for i in range(depth)]
    return ScanSchedule(depth=depth, encoder_scans=encoder, decoder_scans=encoder[::-1])


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


class _ScanUnit(Module):
    """One selective-scan branch: conv, b/c/delta projections, state matrix."""

    def __init__(self, width, state_dim, conv_width, rng, dt_rank=None):
        e = width
        self.conv_kernel = tt.tensor(
            rng.uniform(-1.0, 1.0, size=(e, conv_width)) / np.sqrt(conv_width),
            requires_grad=True,
        )
        self.conv_bias = tt.tensor(np.zeros(e), requires_grad=True)
        self.bc_proj = Linear(e, 2 * state_dim, rng, bias=False)
        rank = dt_rank or max(1, e // 16)
        self.dt_down = Linear(e, rank, rng, bias=False)
        self.dt_up = Linear(rank, e, rng, bias=False)
        # softplus(dt_bias) lands the initial step size in [1e-3, 1e-1]
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=e))
        self.dt_bias = tt.tensor(_softplus_inverse(dt0), requires_grad=True)
        self.a = tt.tensor(
            -np.tile(np.arange(1.0, state_dim + 1.0), (e, 1)), requires_grad=True
        )
        self.d_skip = tt.tensor(np.ones(e), requires_grad=True)
        self.state_dim = state_dim
        # the selective path reads only a and d; the LTI-only fields are
        # fixed placeholders so the scan op keeps its uniform signature
        self._sys = ssm.ContinuousSSM(
            a=self.a,
            b=tt.tensor(np.ones((e, state_dim))),
            c=tt.tensor(np.ones((e, state_dim))),
            d=self.d_skip,
            log_delta=tt.tensor(np.zeros(e)),
        )

    def __call__(self, x: Tensor) -> Tensor:
        xc = tt.silu(
            tt.add(tt.conv1d_depthwise(x, self.conv_kernel), self.conv_bias)
        )
        b_t, c_t = split_last(self.bc_proj(xc), (self.state_dim, self.state_dim))
        delta = tt.softplus(tt.add(self.dt_up(self.dt_down(xc)), self.dt_bias))
        sel = ssm.SelectiveParams(b_t=b_t, c_t=c_t, delta=delta)
        return ssm.selective_scan(self._sys, sel, xc)


class TemporalScanBlock(Module):
    """k parallel selective scans over the leading axis, mean-aggregated,
    gated, projected back and added to the residual."""

    def __init__(
        self,
        channels: int,
        scan_count: int,
        rng: np.random.Generator,
        expand: int = 1,
        state_dim: int = 16,
        conv_width: int = 4,
        zero_init_out: bool = True,
        name: str = "",
    ):
        if scan_count < 1 or scan_count % 2 == 0:
            raise ValueError("scan_count must be odd and >= 1")
        self.channels = channels
        self.scan_count = scan_count
        self.name = name
        inner = channels * expand
        self.inner = inner
        self.in_proj = Linear(channels, 2 * inner, rng, bias=False)
        self.scans = [
            _ScanUnit(inner, state_dim, conv_width, rng) for _ in range(scan_count)
        ]
        self.out_proj = Linear(inner, channels, rng, bias=False, zero_init=zero_init_out)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[2] != self.channels:
            raise tt.ShapeError(
                f"expected (T, B, {self.channels}), got {z.shape}"
            )
        x, gate = split_last(self.in_proj(z), (self.inner, self.inner))
        with ssm.scan_tag(self.name):
            acc = self.scans[0](x)
            for unit in self.scans[1:]:
                acc = tt.add(acc, unit(x))
        y = tt.scale(acc, 1.0 / self.scan_count)
        y = tt.mul(y, tt.silu(gate))
        return tt.add(z, self.out_proj(y))


class ChannelScanBlock(Module):
    """Bidirectional selective scan over the channel axis.

    Input (T, B, C) is rearranged to (C, B, T); after normalization and
    projection the channel sequence is scanned forward and (on a flipped
    copy) backward with independent parameters, both outputs gated by the
    same z-gate and summed.
    """

    def __init__(
        self,
        channels: int,
        tokens: int,
        rng: np.random.Generator,
        expand: int = 2,
        state_dim: int = 16,
        conv_width: int = 4,
        zero_init_out: bool = True,
        name: str = "",
    ):
        self.channels = channels
        self.tokens = tokens
        self.name = name
        inner = tokens * expand
        self.inner = inner
        self.norm = LayerNorm(tokens)
        self.in_proj = Linear(tokens, 2 * inner, rng, bias=False)
        self.fwd = _ScanUnit(inner, state_dim, conv_width, rng)
        self.bwd = _ScanUnit(inner, state_dim, conv_width, rng)
        self.out_proj = Linear(inner, tokens, rng, bias=False, zero_init=zero_init_out)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 3 or z.shape[0] != self.tokens or z.shape[2] != self.channels:
            raise tt.ShapeError(
                f"expected ({self.tokens}, B, {self.channels}), got {z.shape}"
            )
        r = tt.transpose(z, (2, 1, 0))  # (C, B, T)
        x, gate = split_last(self.in_proj(self.norm(r)), (self.inner, self.inner))
        with ssm.scan_tag(self.name):
            y_f = self.fwd(x)
            y_b = tt.flip(self.bwd(tt.flip(x, axis=0)), axis=0)
        g = tt.silu(gate)
        y = tt.add(tt.mul(y_f, g), tt.mul(y_b, g))
        out = tt.transpose(self.out_proj(y), (2, 1, 0))
        return tt.add(z, out)
