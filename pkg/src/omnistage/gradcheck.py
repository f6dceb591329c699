"""Central finite-difference gradient verification (fp64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Param, Tape, Tensor, backward


def relative_error(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-12)


def _evaluate(f: Callable[[], Tensor]) -> float:
    value = float(f().data)
    if not np.isfinite(value):
        raise NumericError("function under check returned a non-finite value")
    return value


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Param], h: float = 1e-5,
                            max_elements: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest elementwise relative error between tape gradients and central differences.

    ``f`` takes no arguments and recomputes a scalar from the current parameter
    values. Params must be fp64. ``max_elements`` caps how many coordinates per
    param are probed (sampled with ``rng``); ``None`` probes all of them.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("finite_difference_check requires fp64 params")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data):
        raise NumericError("function under check returned a non-finite value")
    backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_elements, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = _evaluate(f)
            flat[i] = orig - h
            down = _evaluate(f)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
    return worst
