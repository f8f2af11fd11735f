"""AdamW with decoupled weight decay, plus a warmup + half-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class OptimError(RuntimeError):
    pass


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 5e-2
    base_lr: float = 3e-4
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr=None):
    """One decoupled-weight-decay AdamW step over named parameter arrays.

    `params` and `grads` are dicts name -> ndarray; parameters are updated
    in place. Decay is applied as p <- p - lr*wd*p on top of the moment
    update. Raises OptimError (naming the parameter) on NaN/Inf gradients
    before touching any state.
    """
    if lr is None:
        lr = state.base_lr
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter '{name}'")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p -= lr * state.weight_decay * p


class AdamW:
    """Convenience wrapper driving adamw_step from Tensor parameters."""

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=5e-2):
        self.params = dict(params)
        self.state = AdamWState(
            beta1=betas[0], beta2=betas[1], epsilon=eps,
            weight_decay=weight_decay, base_lr=lr,
        )

    def step(self, lr=None):
        grads = {}
        for name, p in self.params.items():
            if p.grad is not None:
                grads[name] = p.grad
        data = {name: self.params[name].data for name in grads}
        adamw_step(data, grads, self.state, lr)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


@dataclass(frozen=True)
class LrSchedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")


def lr_at(schedule, step):
    """Learning rate at `step`: linear ramp to peak, then half-cosine to floor."""
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * (step + 1) / schedule.warmup_steps
    t = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.floor_lr + (schedule.peak_lr - schedule.floor_lr) * 0.5 * (
        1.0 + math.cos(math.pi * t)
    )
