"""AdamW with decoupled weight decay and a warmup-then-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError


@dataclass
class OptimizerState:
    """First/second moment buffers plus the schedule position."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_ratio: float = 0.03
    total_steps: int | None = None


def lr_at(state: OptimizerState, step: int) -> float:
    """Effective learning rate at a 0-based schedule position."""
    if state.total_steps is None:
        return state.lr
    warmup = max(1, round(state.warmup_ratio * state.total_steps))
    if step < warmup:
        return state.lr * step / warmup
    span = max(1, state.total_steps - warmup)
    frac = min(1.0, (step - warmup) / span)
    return state.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params: dict, grads: dict, state: OptimizerState):
    """One AdamW update over {name -> ndarray} params; returns (params, state).

    Weight decay is decoupled: it scales the parameter directly by the
    effective learning rate, outside the moment update.
    """
    rate = lr_at(state, state.step)
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError("adamw_step", p.shape, g.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1**t)
        vhat = v / (1.0 - state.beta2**t)
        p -= rate * mhat / (np.sqrt(vhat) + state.eps)
        if state.weight_decay:
            p -= rate * state.weight_decay * p
    return params, state


class AdamW:
    """Optimizer bound to a dict of trainable Tensors."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 5e-5,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.1,
        warmup_ratio: float = 0.03,
        total_steps: int | None = None,
    ) -> None:
        self.params = params
        self.state = OptimizerState(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            weight_decay=weight_decay,
            warmup_ratio=warmup_ratio,
            total_steps=total_steps,
        )

    def current_lr(self) -> float:
        return lr_at(self.state, self.state.step)

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        """Apply one update from a {tensor -> grad} map (missing = zero)."""
        arrays = {name: t.data for name, t in self.params.items()}
        by_name = {name: grads.get(t) for name, t in self.params.items()}
        adamw_step(arrays, {k: g for k, g in by_name.items() if g is not None}, self.state)
