"""Central finite-difference gradient verification."""
from __future__ import annotations

import numpy as np

from .autograd import backward, no_grad


def analytic_grads(f, params):
    for p in params:
        p.zero_grad()
    backward(f())
    return [p.grad.copy() for p in params]


def grad_check(f, params, h=1e-5, max_coords=None, rng=None):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and returns a scalar Tensor built from
    ``params``. Each coordinate's error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    With ``max_coords`` set, at most that many randomly chosen coordinates of
    each parameter are probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    grads = analytic_grads(f, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        gflat = g.reshape(-1)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2.0 * h)
                a = gflat[i]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
