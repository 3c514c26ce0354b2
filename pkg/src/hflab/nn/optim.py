"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from hflab.errors import NonFiniteGradient
from hflab.nn.tensor import Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray] | None, state: AdamWState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> AdamWState:
    """One in-place AdamW update.

    ``grads`` defaults to each parameter's ``.grad`` (missing grads count as
    zero).  Every gradient is checked before any parameter moves, so a
    non-finite gradient leaves params and state untouched.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        w = p.data
        if g is None:
            g = np.zeros_like(w)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        if weight_decay:
            w -= lr * weight_decay * w
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
