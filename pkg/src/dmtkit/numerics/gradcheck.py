"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward, no_grad

ParamSet = Mapping[str, Tensor]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParamSet,
    h: float = 1e-5,
    *,
    floor: float = 1e-4,
    kink_tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative error between ``backward`` and central differences.

    ``f`` takes no arguments and reads the current values of ``params``; it is
    re-evaluated with each coordinate nudged by ``+-h``. A coordinate whose
    one-sided slopes disagree by more than ``kink_tol`` (relative) sits on a
    non-differentiable point and is left out of the maximum. Gradients smaller
    than ``floor * max(1, |f|)`` are compared in absolute terms, since central
    differences cannot resolve them below rounding noise. ``max_coords``
    caps the number of coordinates per tensor, sampled with ``seed``.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        f0 = f().item()
        denom_floor = floor * max(1.0, abs(f0))
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                right, left = (fp - f0) / h, (f0 - fm) / h
                if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                    continue
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
                worst = max(worst, err)
    return worst
