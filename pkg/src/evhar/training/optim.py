"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..model import ModelParams


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.0009
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamWState":
        return cls(
            {k: np.zeros_like(p.value) for k, p in params.params.items()},
            {k: np.zeros_like(p.value) for k, p in params.params.items()},
        )


def adamw_update(theta, grad, m, v, step: int, config: OptimizerConfig, decay: bool = True):
    """One AdamW update of a single tensor, in place on ``theta``, ``m`` and ``v``.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``; the
    decay term is skipped when ``decay`` is false.
    """
    if step < 1:
        raise ConfigError("AdamW steps are counted from 1")
    b1, b2 = config.beta1, config.beta2
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * np.square(grad)
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    update = m_hat / (np.sqrt(v_hat) + config.epsilon)
    if decay and config.weight_decay:
        update = update + config.weight_decay * theta
    theta -= config.learning_rate * update
    return theta


def adamw_step(params: ModelParams, state: AdamWState, config: OptimizerConfig = OptimizerConfig()) -> None:
    """Advance ``state.step`` and update every parameter from its gradient.

    Weight decay applies only to parameters tagged ``decay`` (conv and
    linear weights); biases and norm scales/shifts are never decayed.
    """
    state.step += 1
    for name, p in params.params.items():
        adamw_update(p.value, p.grad, state.m[name], state.v[name], state.step, config, p.decay)
