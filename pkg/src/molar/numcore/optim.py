"""Adam, the warmup + cosine learning-rate schedule, and gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from molar.errors import ConfigError, TrainingError
from molar.numcore.tensor import Parameter

WARMUP_START_FRACTION = 0.01


@dataclass(frozen=True)
class LrSchedule:
    max_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must lie in [0, {self.total_steps})")
        if self.max_lr < 0:
            raise ConfigError("max_lr must be non-negative")


def lr_schedule(step: int, sched: LrSchedule) -> float:
    """Linear warmup from max_lr/100 to max_lr, then cosine decay to 0 at total_steps."""
    step = min(max(step, 0), sched.total_steps)
    if step < sched.warmup_steps:
        start = sched.max_lr * WARMUP_START_FRACTION
        return start + (sched.max_lr - start) * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_update(params: list[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step over ``params`` (in place).

    A parameter whose gradient is identically zero is left untouched and
    its moments are not advanced, so excluded or unused tensors never move.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    state.step += 1
    for p in params:
        g = p.grad
        if not g.any():
            continue
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
            state.t[key] = 0
        m, v = state.m[key], state.v[key]
        if m.shape != p.shape:
            raise TrainingError(f"optimizer moment shape {m.shape} does not match parameter {key!r} {p.shape}")
        t = state.t[key] + 1
        state.t[key] = t
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total
