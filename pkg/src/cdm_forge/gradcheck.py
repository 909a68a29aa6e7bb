"""Central finite-difference reference gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def numerical_grad(fn: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Perturb each entry of ``arrays`` in place by +-h and difference ``fn()``."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a| + |n|, floor)`` over the flattened arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))
