"""Adam with bias correction, plus the linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    step_count: int = 0
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(params: dict[str, Tensor], learning_rate: float = 5e-5,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment={k: np.zeros_like(t.data) for k, t in params.items()},
        second_moment={k: np.zeros_like(t.data) for k, t in params.items()},
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr_scale: float = 1.0) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; schedule multipliers come in via lr_scale."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    lr = state.learning_rate * lr_scale
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if np.isnan(g).any():
            raise FloatingPointError(f"adam_step: NaN gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape "
                             f"{p.data.shape} for '{name}'")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def linear_decay(step: int, total_steps: int, warmup_frac: float = 0.01) -> float:
    """Warmup then linear decay to zero; returns the lr multiplier for `step` (1-based)."""
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step <= warmup:
        return step / warmup
    if total_steps <= warmup:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warmup))
