import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from krts.autograd import Parameter

log = logging.getLogger(__name__)


class AdamConfig(BaseModel):
    learning_rate: float = 2.5e-4
    adam_epsilon: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999


@dataclass(frozen=True)
class LinearDecay:
    """alpha * (1 - consumed / total), floored at zero."""
    base_lr: float
    total_steps: int

    def progress(self, consumed_steps: int) -> float:
        if self.total_steps <= 0:
            return 1.0
        return min(1.0, max(0.0, consumed_steps / self.total_steps))

    def lr(self, consumed_steps: int) -> float:
        return self.base_lr * (1.0 - self.progress(consumed_steps))


def adam_step(
    values: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    first_moments: Sequence[np.ndarray],
    second_moments: Sequence[np.ndarray],
    t: int,
    lr: float,
    config: AdamConfig,
) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray]]:
    """One bias-corrected Adam step. Returns new (values, m, v); inputs are untouched."""
    if t < 1:
        raise ValueError(f"Adam step counter must start at 1, got {t}")
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t
    new_values, new_m, new_v = [], [], []
    for value, grad, m, v in zip(values, grads, first_moments, second_moments):
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        new_values.append((value - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(value.dtype))
        new_m.append(m)
        new_v.append(v)
    return new_values, new_m, new_v


def global_grad_norm(params: Sequence[Parameter]) -> float:
    return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescales gradients so their global norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for param in params:
            param.grad = param.grad * scale
    return norm


class Adam:
    """Owns the first and second moments and the step counter of a parameter list."""

    def __init__(self, params: Sequence[Parameter], config: AdamConfig):
        self.params = list(params)
        self.config = config
        self.step_count = 0
        self.first_moments = [np.zeros_like(p.data) for p in self.params]
        self.second_moments = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self, lr: float):
        self.step_count += 1
        values, self.first_moments, self.second_moments = adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.first_moments,
            self.second_moments,
            self.step_count,
            lr,
            self.config,
        )
        for param, value in zip(self.params, values):
            param.data = value

    def load_moments(self, step_count: int, first: Sequence[np.ndarray], second: Sequence[np.ndarray]):
        if len(first) != len(self.params) or len(second) != len(self.params):
            raise ValueError(
                f"Optimizer state holds {len(first)} moments for {len(self.params)} parameters"
            )
        self.step_count = step_count
        self.first_moments = [np.array(m, dtype=p.dtype) for m, p in zip(first, self.params)]
        self.second_moments = [np.array(v, dtype=p.dtype) for v, p in zip(second, self.params)]
