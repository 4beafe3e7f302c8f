"""First-order optimizers over autodiff tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, UsageError


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {self.weight_decay}")


def _param_label(p: Tensor, i: int) -> str:
    return p.name if p.name else f"#{i}"


def optimizer_step(state: OptimizerState, params: Sequence[Tensor]) -> None:
    """Apply one update in place and clear the gradients."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise UsageError(f"parameter {_param_label(p, i)} has no gradient; call backward() first")
    if state.kind == "adam" and not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    for i, p in enumerate(params):
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.value
        if state.kind == "sgd":
            p.value -= lr * g
        else:
            m, v = state.m[i], state.v[i]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.grad = None


class Optimizer:
    """Binds an :class:`OptimizerState` to a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], state: OptimizerState):
        self.params = list(params)
        self.state = state

    def step(self) -> None:
        optimizer_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd(params: Sequence[Tensor], lr: float, weight_decay: float = 0.0) -> Optimizer:
    return Optimizer(params, OptimizerState("sgd", lr, weight_decay))


def adam(params: Sequence[Tensor], lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> Optimizer:
    return Optimizer(params, OptimizerState("adam", lr, weight_decay, betas[0], betas[1], eps))


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return float(np.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    if not max_norm > 0:
        raise ValueError(f"clip bound must be positive, got {max_norm}")
    norm = global_grad_norm(params)
    if np.isfinite(max_norm) and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm
