"""ADAM updates and the two-phase learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, NumericError


@dataclass
class AdamState:
    """Per-parameter moment buffers for one network."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, named_params, beta1: float = 0.5, beta2: float = 0.999,
                   epsilon: float = 1e-8) -> "AdamState":
        state = cls(beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, p in named_params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(named_params, state: AdamState, lr: float) -> None:
    """Bias-corrected ADAM update; consumes and clears the gradients."""
    if lr < 0:
        raise ContractError(f"adam_step: lr must be >= 0, got {lr}")
    params = list(named_params)
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name} has no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"adam_step: non-finite gradient in parameter {name}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params:
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        p.data -= step.astype(p.data.dtype, copy=False)
        p.grad = None


@dataclass
class LrSchedule:
    """Constant then linear-to-zero learning rate over the epoch range."""

    base_lr: float = 0.0002
    constant_epochs: int = 100
    total_epochs: int = 160

    def __post_init__(self):
        if not 0 < self.constant_epochs < self.total_epochs:
            raise ContractError(
                f"LrSchedule: need 0 < constant_epochs < total_epochs, "
                f"got {self.constant_epochs}, {self.total_epochs}"
            )
        if self.base_lr <= 0:
            raise ContractError(f"LrSchedule: base_lr must be > 0, got {self.base_lr}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ContractError(
            f"lr_at: epoch {epoch} outside [0, {schedule.total_epochs}]"
        )
    if epoch < schedule.constant_epochs:
        return schedule.base_lr
    span = schedule.total_epochs - schedule.constant_epochs
    return schedule.base_lr * (schedule.total_epochs - epoch) / span
