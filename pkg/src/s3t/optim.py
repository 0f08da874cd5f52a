"""Warmup + cosine learning-rate schedule and a functional AdamW step."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import torch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class NonFiniteGradient(ArithmeticError):
    pass


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine decay to 0 at ``total_steps``."""
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup_steps) / span))


@dataclass
class AdamState:
    step: int = 0
    exp_avg: Dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Dict[str, torch.Tensor]) -> "AdamState":
        return cls(0, {k: torch.zeros_like(v) for k, v in params.items()},
                   {k: torch.zeros_like(v) for k, v in params.items()})


@torch.no_grad()
def optimizer_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: AdamState,
                   lr: float, weight_decay: float,
                   no_decay: Optional[Callable[[str], bool]] = None):
    """One AdamW update, in place: ``p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)``.

    Parameters for which ``no_decay(name)`` is true skip the decay term.
    Raises :class:`NonFiniteGradient` before touching anything if a gradient is NaN/inf.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
        v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
        update = (m / bc1) / ((v / bc2).sqrt() + EPS)
        if weight_decay and not (no_decay and no_decay(name)):
            update = update + weight_decay * p
        p.sub_(lr * update)
    return params, state
