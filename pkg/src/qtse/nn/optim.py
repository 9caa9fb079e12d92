"""Adam and a halve-on-plateau learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import OptimStepRejected


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update.

    Parameters without a gradient entry are left as they are. Raises
    :class:`OptimStepRejected` (and changes nothing) if any gradient is not
    finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise OptimStepRejected(f"non-finite gradient for {name}")
    t = state.step + 1
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        m[name] = beta1 * m.get(name, 0.0) + (1 - beta1) * g
        v[name] = beta2 * v.get(name, 0.0) + (1 - beta2) * g * g
        m_hat = m[name] / (1 - beta1**t)
        v_hat = v[name] / (1 - beta2**t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(t, m, v)


class PlateauHalving:
    """Halve the learning rate after ``patience`` epochs without a strict
    decrease of the validation loss."""

    def __init__(self, lr: float = 1e-3, patience: int = 3, factor: float = 0.5):
        if lr <= 0 or patience < 1:
            raise ValueError("need lr > 0 and patience >= 1")
        self.lr, self.patience, self.factor = lr, patience, factor
        self.best = np.inf
        self.bad_epochs = 0
        self.halvings = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.halvings += 1
                self.bad_epochs = 0
        return self.lr
