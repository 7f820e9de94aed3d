"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be > 0, got {self.learning_rate}")

    def hyperparams(self) -> dict:
        return {"optimizer": "adam", "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One in-place update of the arrays in ``params``.

    Decay is applied first (``p -= lr * wd * p``), then the bias-corrected Adam
    delta.  Missing gradients count as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    lr = state.learning_rate
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
