"""SGD and Adam steps over flat parameter vectors.

Both steps leave a component bit-identical whenever its gradient has been
exactly zero at every step so far: SGD because p - lr*0 == p, Adam because
zero moments stay zero and 0/(sqrt(0)+eps) == 0. The membership decision
relies on this, so the updates are kept in this exact form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 1e-2

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


OptimizerConfig = SGDConfig | AdamConfig


def _check_layouts(params: np.ndarray, grad: np.ndarray) -> None:
    if params.shape != grad.shape:
        raise ValueError(f"parameter/gradient layout mismatch: "
                         f"{params.shape} vs {grad.shape}")


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """params - lr*grad, in the params dtype."""
    _check_layouts(params, grad)
    return params - params.dtype.type(lr) * grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, size: int, dtype=np.float32) -> "AdamState":
        return cls(m=np.zeros(size, dtype=dtype), v=np.zeros(size, dtype=dtype))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray,
              cfg: AdamConfig) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns new params and advanced state."""
    _check_layouts(params, grad)
    _check_layouts(params, state.m)
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    step = params.dtype.type(cfg.lr) * m_hat / (np.sqrt(v_hat) + params.dtype.type(cfg.eps))
    return (params - step).astype(params.dtype, copy=False), AdamState(
        m.astype(params.dtype, copy=False), v.astype(params.dtype, copy=False), t)
