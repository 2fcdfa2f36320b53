"""Weight initialization and the Adam update."""
from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import DTYPE, Parameter

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

INIT_MODES = ("relu_scaled", "zeros", "small")


def init_weights(shape, fan_in: int, mode: str, rng: np.random.Generator,
                 name: str | None = None) -> Parameter:
    """Draw a parameter tensor.

    ``relu_scaled`` samples N(0, 2/fan_in); ``small`` is the same scaled by 0.1;
    ``zeros`` gives exact zeros.
    """
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    if mode == "zeros":
        return Parameter(np.zeros(shape, dtype=DTYPE), name=name)
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}")
    std = np.sqrt(2.0 / fan_in)
    if mode == "small":
        std *= 0.1
    return Parameter(rng.normal(0.0, std, size=shape).astype(DTYPE), name=name)


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update in place; zeroes gradients afterwards."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * g * g
        m_hat = p.adam_m / (1 - beta1 ** t)
        v_hat = p.adam_v / (1 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.zero_grad()
