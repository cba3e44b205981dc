"""Decoupled-weight-decay Adam over named parameter lists."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-2,
    ):
        self.named_params = list(named_params)
        names = [n for n, _ in self.named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros(p.shape) for n, p in self.named_params}
        self.v = {n: np.zeros(p.shape) for n, p in self.named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            new = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
            p.assign_(new)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moment estimates keyed for checkpointing."""
        out = {}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        for name in self.m:
            self.m[name] = arrays[f"m.{name}"].copy()
            self.v[name] = arrays[f"v.{name}"].copy()
        self.step_count = step_count
