"""Shared builders for the test modules."""

import numpy as np

from dmtkit.dmt import DmtConfig, init_layer_params


def random_layers(config: DmtConfig, seed: int = 0, scale: float = 1.0):
    """Layer parameters with every tensor random (including LN and biases), so no branch is trivially zero."""
    rng = np.random.default_rng(seed)
    layers = [init_layer_params(config, rng) for _ in range(config.L)]
    for layer in layers:
        for name, t in layer.items():
            if name.endswith("_g"):
                t.data = 1.0 + 0.1 * rng.normal(size=t.shape)
            elif t.data.ndim == 1:
                t.data = 0.1 * rng.normal(size=t.shape)
            else:
                t.data = t.data * scale
    return layers


def arrays(params) -> dict:
    """Plain numpy copies of a ParamSet, for the dense oracles."""
    return {k: t.data.copy() for k, t in params.items()}


def chebyshev_hole_radius(valid) -> int:
    """Largest Chebyshev distance from an invalid cell to its nearest valid cell (0 if none invalid)."""
    valid = np.asarray(valid, dtype=bool)
    ys, xs = np.nonzero(valid)
    if len(ys) == 0:
        raise ValueError("no valid cell")
    worst = 0
    for y, x in zip(*np.nonzero(~valid)):
        worst = max(worst, int(np.min(np.maximum(np.abs(ys - y), np.abs(xs - x)))))
    return worst
