"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0


@dataclass
class AdamW:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    weight_decay: float = 0.0
    states: dict = field(default_factory=dict)

    def state_for(self, param):
        key = param.name or id(param)
        state = self.states.get(key)
        if state is None:
            state = AdamState(np.zeros_like(param.data), np.zeros_like(param.data))
            self.states[key] = state
        return state

    def step(self, params):
        for p in params:
            adamw_step(p, self.state_for(p), self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


def adamw_step(param, state, lr, beta1=0.9, beta2=0.98, eps=1e-9, weight_decay=0.0):
    """One in-place AdamW update of ``param.data`` from ``param.grad``."""
    grad = param.grad
    if grad.shape != param.data.shape or state.m.shape != param.data.shape:
        raise ValueError(f"AdamW shape mismatch for {param.name}: value {param.data.shape}, "
                         f"grad {grad.shape}, state {state.m.shape}")
    state.step_count += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * grad
    state.v *= beta2
    state.v += (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.step_count)
    v_hat = state.v / (1.0 - beta2 ** state.step_count)
    if weight_decay:
        param.data *= 1.0 - lr * weight_decay
    param.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def global_grad_norm(params):
    return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= factor
    return norm
