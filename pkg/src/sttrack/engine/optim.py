"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Parameter


class AdamW:
    """Adam with bias-corrected moments and decay applied directly to the weights.

    ``groups`` is a list of dicts with keys ``params`` (a list of
    ``(name, Parameter)`` pairs) and ``lr``; other hyperparameters are shared.
    """

    def __init__(
        self,
        groups: list[dict],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.groups = [dict(g) for g in groups]
        for g in self.groups:
            g.setdefault("base_lr", g["lr"])
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {}
        self.v = {}
        for g in self.groups:
            for name, p in g["params"]:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def named_params(self) -> Iterable[tuple[str, Parameter]]:
        for g in self.groups:
            yield from g["params"]

    def set_lr_scale(self, scale: float) -> None:
        for g in self.groups:
            g["lr"] = g["base_lr"] * scale

    def step(self) -> None:
        for name, p in self.named_params():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for g in self.groups:
            lr = g["lr"]
            for name, p in g["params"]:
                grad = p.grad
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                if self.weight_decay:
                    p.data *= 1.0 - lr * self.weight_decay
                denom = np.sqrt(v / c2) + self.eps
                p.data -= (lr / c1) * m / denom


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(np.sum(p.grad.astype(np.float64) ** 2) for p in params)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total
