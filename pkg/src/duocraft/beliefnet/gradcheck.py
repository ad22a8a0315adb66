"""Finite-difference gradient verification for the hand-written backprop.

`check_gradients` perturbs entries of every parameter tensor with central
differences and compares against the analytic gradient dict produced by a
single forward/backward closure. It returns per-tensor relative errors so
callers can assert a tolerance and confirm coverage of the full parameter set.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def check_gradients(
    params: dict,
    loss_and_grads: Callable[[dict], tuple[float, dict]],
    eps: float = 1e-6,
    max_entries: int = 24,
    rng: np.random.Generator | None = None,
) -> dict:
    """Return {tensor_name: max relative error} over sampled entries.

    loss_and_grads(params) must return (scalar loss, grads dict) and be a
    deterministic function of params. Every tensor in `params` is checked;
    at most `max_entries` randomly chosen entries per tensor are perturbed.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    _, grads = loss_and_grads(params)
    missing = set(params) - set(grads)
    if missing:
        raise AssertionError(f"no analytic gradient for: {sorted(missing)}")
    errors = {}
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        worst = 0.0
        g = grads[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_and_grads(params)
            flat[i] = orig - eps
            lm, _ = loss_and_grads(params)
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            ana = g[i]
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
        errors[name] = worst
    return errors


def max_error(errors: dict) -> float:
    return max(errors.values()) if errors else 0.0
