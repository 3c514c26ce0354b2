"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from hflab.nn.tensor import Tensor, no_grad


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | list, h: float = 1e-5,
               floor: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences.

    ``f`` rebuilds the scalar output from the current parameter values.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_coords`` limits the check to a seeded random subset per parameter.
    """
    items = list(params.items()) if isinstance(params, Mapping) else [(str(i), p) for i, p in enumerate(params)]
    for _, p in items:
        if p.data.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit mode only")
        p.grad = None
    out = f()
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in items}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
