"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import NumericError


@dataclass
class OptState:
    """First/second moment buffers keyed by parameter name, plus the step count."""

    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    state: OptState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    grads: dict[str, torch.Tensor] | None = None,
) -> OptState:
    """One in-place AdamW update.

    ``grads`` defaults to each parameter's ``.grad``; parameters without a
    gradient are skipped.  Any non-finite gradient aborts before anything is
    modified.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name}; step aborted")

    beta1, beta2 = betas
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        v = state.exp_avg_sq[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state
