"""Adam with linear learning-rate decay and global-norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import SharedParams


def linear_decay_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int = 0) -> float:
    """Linear warmup (optional) then linear decay to zero at ``total_steps``."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= 0:
        return base_lr
    return base_lr * max(0.0, 1.0 - step / total_steps)


@dataclass
class Adam:
    lr: float = 1e-4
    total_steps: int = 0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = 1.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return linear_decay_lr(self.lr, self.t, self.total_steps, self.warmup_steps)

    def step(self, params: SharedParams, names=None) -> float:
        """Apply one update from the ``.grad`` buffers; returns the lr used."""
        names = list(params.names() if names is None else names)
        grads = {n: params[n].grad for n in names if params[n].grad is not None}
        if self.max_grad_norm is not None:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > self.max_grad_norm:
                s = self.max_grad_norm / (norm + 1e-12)
                grads = {n: g * s for n, g in grads.items()}
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for n, g in grads.items():
            m = self.m.get(n)
            v = self.v.get(n)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[n], self.v[n] = m, v
            params[n].data = params[n].data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr

    def hyper(self) -> dict:
        return {"lr": self.lr, "total_steps": self.total_steps, "warmup_steps": self.warmup_steps,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "max_grad_norm": self.max_grad_norm, "t": self.t}
