"""AdamW with decoupled weight decay, global-norm clipping and LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["AdamWState", "global_grad_norm", "clip_gradients", "adamw_step", "lr_at"]


@dataclass
class AdamWState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            step=0,
        )


def global_grad_norm(params: dict[str, Tensor]) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm (may be non-finite; the caller decides
    whether to skip the step).
    """
    norm = global_grad_norm(params)
    if math.isfinite(norm) and norm > max_norm > 0.0:
        factor = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


def grads_finite(params: dict[str, Tensor]) -> bool:
    return all(
        t.grad is None or bool(np.all(np.isfinite(t.grad))) for t in params.values()
    )


def adamw_step(
    params: dict[str, Tensor],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One update with bias-corrected moments and decoupled decay.

    Decay multiplies parameters by (1 - lr * weight_decay), so lr = 0
    leaves parameters untouched regardless of decay.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay != 0.0:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * update.astype(p.data.dtype)


def lr_at(
    step: int,
    base_lr: float,
    warmup_steps: int,
    total_steps: int,
    min_lr: float = 0.0,
) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
