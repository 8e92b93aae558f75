"""Central finite-difference verification of reverse-mode gradients."""

import numpy as np

from .tensor import Tensor, backward, no_grad


def fd_check(f, x: Tensor, h: float = 1e-6, coords=None) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    f maps a Tensor to a scalar Tensor and must be deterministic (no live
    dropout). coords optionally restricts the check to an iterable of flat
    indices; default is every coordinate.
    """
    base = Tensor(x.data.copy(), requires_grad=True)
    loss = f(base)
    backward(loss)
    analytic = base.grad.reshape(-1)

    flat = x.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in coords:
            bump = flat.copy()
            bump[i] += h
            up = f(Tensor(bump.reshape(x.shape))).item()
            bump[i] -= 2 * h
            down = f(Tensor(bump.reshape(x.shape))).item()
            numeric = (up - down) / (2 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
    return worst
