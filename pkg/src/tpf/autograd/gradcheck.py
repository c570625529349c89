"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` maps ``x`` to a scalar tensor.  Never raises on mismatch; callers
    compare the returned error against their tolerance.
    """
    return check_gradients_multi(lambda ts: f(ts[0]), [x], h)


def check_gradients_multi(f: Callable[[Sequence[Tensor]], Tensor], xs: Sequence[Tensor],
                          h: float = 1e-5, max_coords: int | None = None,
                          rng: np.random.Generator | None = None) -> float:
    """Same as :func:`check_gradients` for several inputs at once.

    ``max_coords`` limits the number of probed coordinates per input (sampled
    with ``rng``) to keep checks on large parameter sets affordable.
    """
    xs = [t if t.requires_grad else Tensor(t.data, requires_grad=True) for t in xs]
    for t in xs:
        t.grad = None
    out = f(xs)
    out.backward()
    worst = 0.0
    for t in xs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        base = flat.copy()
        for i in coords:
            with no_grad():
                flat[i] = base[i] + h
                fp = float(f(xs).data)
                flat[i] = base[i] - h
                fm = float(f(xs).data)
                flat[i] = base[i]
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
