"""Noise schedule, forward corruption, the training objective, and samplers.

Schedule arrays and the sampling loop work on plain float64 numpy; only the
training loss builds a differentiable graph.  All randomness comes from
generators passed in explicitly.

Timestep convention: arrays are indexed t = 0..T-1 with alpha_bar[t] the
cumulative product up to and including t.  Stepping "to 0" in the reverse
process produces the clean estimate itself (target alpha_bar treated as 1),
so a single step from T-1 to 0 is a complete, if crude, sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tt
from .tensor import Tensor

EpsModel = Callable[[np.ndarray, np.ndarray, object], np.ndarray]
# eps_model(z_t (T,B,C), t (B,), cond) -> predicted noise (T,B,C)


@dataclass
class DiffusionSchedule:
    t_train: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def bar(self, t) -> np.ndarray:
        return self.alpha_bar[np.asarray(t)]


def build_schedule(kind: str = "linear", t_train: int = 1000) -> DiffusionSchedule:
    """Linear beta ramp 1e-4 -> 2e-2; alpha_bar accumulated in extended precision."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind: {kind}")
    if t_train < 1:
        raise ValueError("t_train must be >= 1")
    beta = np.linspace(1e-4, 2e-2, t_train, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha.astype(np.longdouble)).astype(np.float64)
    return DiffusionSchedule(t_train=t_train, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _bar_coeffs(sched: DiffusionSchedule, t, ndim: int):
    """sqrt(alpha_bar) and sqrt(1 - alpha_bar) shaped to broadcast over (T, B, ...)."""
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.t_train):
        raise ValueError(f"timestep out of range [0, {sched.t_train})")
    ab = sched.alpha_bar[t]
    shape = (1, -1) + (1,) * (ndim - 2) if t.ndim else ()
    ab = ab.reshape(shape) if t.ndim else ab
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def q_sample(sched: DiffusionSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Forward corruption z_t = sqrt(ab) z0 + sqrt(1 - ab) eps.

    ``t`` is either a scalar or a per-batch vector matching axis 1 of z0.
    """
    if eps.shape != z0.shape:
        raise ValueError("eps must match z0's shape")
    root_ab, root_1mab = _bar_coeffs(sched, t, z0.ndim)
    return root_ab * z0 + root_1mab * eps


def training_loss(
    model,
    sched: DiffusionSchedule,
    z0: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
    cond: Tensor,
) -> Tensor:
    """MSE between the injected and the predicted noise (differentiable)."""
    z_t = q_sample(sched, z0, t, eps)
    eps_hat = model(tt.tensor(z_t), t, cond)
    diff = tt.sub(eps_hat, tt.tensor(eps))
    return tt.tmean(tt.mul(diff, diff))


def ddim_step(
    eps_model: EpsModel,
    sched: DiffusionSchedule,
    z_t: np.ndarray,
    t: int,
    t_prev: int,
    cond,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One deterministic (eta = 0) or stochastic reverse step t -> t_prev."""
    if not (t > t_prev >= 0):
        raise ValueError(f"need t > t_prev >= 0, got {t} -> {t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    b = z_t.shape[1]
    eps_hat = eps_model(z_t, np.full(b, t, dtype=np.int64), cond)
    a_t = float(sched.alpha_bar[t])
    a_prev = float(sched.alpha_bar[t_prev]) if t_prev > 0 else 1.0
    z0_hat = (z_t - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
    sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
    direction = np.sqrt(max(1.0 - a_prev - sigma**2, 0.0)) * eps_hat
    z = np.sqrt(a_prev) * z0_hat + direction
    if eta > 0.0:
        if rng is None:
            raise ValueError("stochastic step (eta > 0) needs an rng")
        z = z + sigma * rng.standard_normal(z_t.shape)
    return z


def ddpm_step(
    eps_model: EpsModel,
    sched: DiffusionSchedule,
    z_t: np.ndarray,
    t: int,
    cond,
    rng: np.random.Generator,
) -> np.ndarray:
    """Ancestral step t -> t-1 (A/B alternative to the strided DDIM path)."""
    b = z_t.shape[1]
    eps_hat = eps_model(z_t, np.full(b, t, dtype=np.int64), cond)
    a_t = sched.alpha[t]
    ab_t = sched.alpha_bar[t]
    mean = (z_t - sched.beta[t] / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(a_t)
    if t == 0:
        return mean
    ab_prev = sched.alpha_bar[t - 1]
    var = sched.beta[t] * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + np.sqrt(var) * rng.standard_normal(z_t.shape)


def sample_timesteps(t_train: int, steps: int) -> list[tuple[int, int]]:
    """Evenly strided (t, t_prev) pairs descending from t_train - 1 to 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > t_train:
        raise ValueError("steps cannot exceed the training step count")
    grid = np.unique(np.linspace(0, t_train - 1, steps + 1).round().astype(int))
    return [(int(grid[i]), int(grid[i - 1])) for i in range(len(grid) - 1, 0, -1)]


def sample_loop(
    eps_model: EpsModel,
    sched: DiffusionSchedule,
    shape: tuple[int, ...],
    cond,
    rng: np.random.Generator,
    steps: int = 50,
    guidance_scale: float = 1.0,
    null_cond=None,
    eta: float = 0.0,
    method: str = "ddim",
) -> np.ndarray:
    """Iterate reverse steps from pure noise.

    With guidance_scale != 1, predictions blend conditional and
    null-condition passes: eps = eps_null + s (eps_cond - eps_null);
    at s = 1 the conditional prediction is used directly.
    """
    if guidance_scale != 1.0 and null_cond is None:
        raise ValueError("guidance needs the null condition embedding")

    if guidance_scale == 1.0:
        guided = eps_model
    else:

        def guided(z, t, c):
            e_cond = eps_model(z, t, c)
            e_null = eps_model(z, t, null_cond)
            return e_null + guidance_scale * (e_cond - e_null)

    z = rng.standard_normal(shape)
    if method == "ddim":
        for t, t_prev in sample_timesteps(sched.t_train, steps):
            z = ddim_step(guided, sched, z, t, t_prev, cond, eta=eta, rng=rng)
    elif method == "ddpm":
        if steps != sched.t_train:
            raise ValueError("ancestral sampling runs the full chain")
        for t in range(sched.t_train - 1, -1, -1):
            z = ddpm_step(guided, sched, z, t, cond, rng)
    else:
        raise ValueError(f"unknown sampling method: {method}")
    return z
