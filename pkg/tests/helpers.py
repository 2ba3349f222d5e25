"""Shared helpers for the test suite."""

import numpy as np

from growkit.model import init_params


def random_params(config, seed, std=0.3, dtype=np.float64):
    """O(1)-scale random parameters, gains near 1.

    Gradient checks against central differences need parameter magnitudes
    comfortably above the perturbation size; the training init (std 0.02)
    is too small for an absolute epsilon of 1e-3.
    """
    rng = np.random.default_rng(seed)
    out = init_params(config, seed)
    for name, t in out.named_tensors():
        t[...] = rng.normal(0.0, std, size=t.shape)
        if name.endswith(("norm_attn", "norm_mlp")) or name == "final_norm":
            t += 1.0
    return out.astype(dtype)
