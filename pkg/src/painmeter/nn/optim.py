"""Bias-corrected Adam over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from painmeter.nn.ops import UsageError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, tensors: dict[str, np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(a) for k, a in tensors.items()},
                   v={k: np.zeros_like(a) for k, a in tensors.items()}, **kw)


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Return updated parameters and state; inputs are left untouched."""
    if grads.keys() != tensors.keys() or state.m.keys() != tensors.keys():
        raise UsageError("gradient, parameter and optimizer keys differ")
    for k, a in tensors.items():
        if grads[k].shape != a.shape or state.m[k].shape != a.shape:
            raise UsageError(f"shape mismatch for {k}: {a.shape} vs {grads[k].shape}")
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, a in tensors.items():
        g = grads[k]
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        new_params[k] = a - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
