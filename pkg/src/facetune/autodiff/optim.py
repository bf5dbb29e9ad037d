"""Parameters and the Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ConfigError, GradientError
from .tensor import Tensor, get_default_dtype


class Parameter(Tensor):
    """Trainable tensor carrying its Adam moment buffers.

    ``decay=False`` exempts the parameter from weight decay.
    """

    __slots__ = ("adam_m", "adam_v", "step_count", "decay")

    def __init__(self, data, name: str | None = None, decay: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype or get_default_dtype(), name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0
        self.decay = decay

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class OptimConfig:
    """Adam hyper-parameters; defaults are the training values (lr 1e-4, decay 5e-5)."""

    learning_rate: float = 1e-4
    weight_decay: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decoupled: bool = True

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


class Adam:
    """Bias-corrected Adam.

    With ``decoupled=True`` weight decay shrinks the parameter directly
    (``p -= lr * wd * p``) before the moment update; otherwise ``wd * p`` is
    added to the gradient.
    """

    def __init__(self, params, config: OptimConfig | None = None):
        self.params = list(params)
        self.config = config or OptimConfig()

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        missing = [p.name or f"<param {i}>" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise GradientError(f"parameters without gradient: {', '.join(missing)}")
        c = self.config
        for p in self.params:
            g = np.asarray(p.grad, dtype=p.dtype)
            wd = c.weight_decay if p.decay else 0.0
            if wd and c.decoupled:
                p.data -= p.dtype.type(c.learning_rate * wd) * p.data
            elif wd:
                g = g + p.dtype.type(wd) * p.data
            p.step_count += 1
            t = p.step_count
            p.adam_m *= p.dtype.type(c.beta1)
            p.adam_m += p.dtype.type(1 - c.beta1) * g
            p.adam_v *= p.dtype.type(c.beta2)
            p.adam_v += p.dtype.type(1 - c.beta2) * g * g
            m_hat = p.adam_m / (1 - c.beta1 ** t)
            v_hat = p.adam_v / (1 - c.beta2 ** t)
            p.data -= (c.learning_rate * m_hat / (np.sqrt(v_hat) + c.epsilon)).astype(p.dtype)
            p.grad = None
