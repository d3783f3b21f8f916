"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, List, Sequence, Tuple

import numpy as np


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    loss_fn: Callable[[], Tuple[float, Sequence[np.ndarray]]],
    params: List[np.ndarray],
    eps: float = 1e-3,
    max_coords: int | None = 20,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``loss_fn`` returns ``(loss, grads)`` with one gradient per entry of
    ``params``. Parameters are perturbed in place and restored. At most
    ``max_coords`` randomly chosen coordinates are probed per tensor.
    Parameters should be float64 for the check to be meaningful.
    """
    rng = rng or np.random.default_rng(0)
    _, grads = loss_fn()
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_coords, replace=False)
        gflat = g.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn()[0])
            flat[i] = orig - eps
            lm = float(loss_fn()[0])
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            worst = max(worst, float(relative_error(gflat[i], num, floor)))
    return worst
