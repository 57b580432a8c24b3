"""AdamW, gradient clipping and a warmup/decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class TrainingError(RuntimeError):
    """Training diverged or was misconfigured."""


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {p.name or 'parameter'}")
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            # decoupled decay; a fresh array so callers holding the old data are unaffected
            p.data = p.data - self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale grads in place to a global L2 norm of at most ``max_norm``; return the pre-clip norm."""
    total = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None)))
    if not np.isfinite(total):
        raise TrainingError("non-finite gradient norm")
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


def scheduled_lr(base: float, step: int, total: int, warmup_frac: float = 0.0, decay: str = "constant") -> float:
    """Linear warmup over ``warmup_frac`` of training, then constant or linear decay to zero."""
    warm = int(round(warmup_frac * total))
    if warm and step < warm:
        return base * (step + 1) / warm
    if decay == "constant":
        return base
    if decay == "linear":
        span = max(1, total - warm)
        return base * max(0.0, 1.0 - (step - warm) / span)
    raise ValueError(f"unknown decay {decay!r}")
