"""Shared test utilities: finite-difference gradient oracle."""

import numpy as np


def fd_gradients(loss_fn, kernels, h=1e-5):
    """Central finite-difference gradients of ``loss_fn()`` w.r.t. kernel weights.

    ``loss_fn`` must recompute the loss from the kernels' current weights;
    it is the independent oracle against which tape gradients are checked.
    """
    grads = []
    for k in kernels:
        g = np.zeros_like(k.weights)
        flat_w = k.weights.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_w.size):
            orig = flat_w[i]
            flat_w[i] = orig + h
            f_plus = loss_fn()
            flat_w[i] = orig - h
            f_minus = loss_fn()
            flat_w[i] = orig
            flat_g[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-8):
    """Worst relative disagreement between two gradient lists."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
