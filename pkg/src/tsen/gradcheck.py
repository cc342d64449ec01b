"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr``, perturbed in place and restored."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale < 1e-12:
        return float(np.abs(analytic - numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build: Callable[..., Tensor], leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``build(*leaves)`` must return a scalar tensor; it is called once with
    tracked handles and then repeatedly with plain constants.
    """
    tape = Tape()
    loss = build(*[tape.track(p) for p in leaves])
    analytic = tape.backward(loss, accumulate=False)
    worst = 0.0
    for p in leaves:
        f = lambda: build(*[Tensor(q.values) for q in leaves]).item()
        worst = max(worst, relative_error(analytic[p], numeric_gradient(f, p.values, step)))
    return worst
