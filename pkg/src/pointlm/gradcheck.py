"""Central-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, no_grad


class NonFiniteError(FloatingPointError):
    pass


def _scalar(t: Tensor) -> float:
    v = t.item()
    if not np.isfinite(v):
        raise NonFiniteError(f"function produced non-finite value {v}")
    return v


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    xg = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    out = f(xg)
    _scalar(out)
    out.backward()
    analytic = np.zeros_like(xg.data) if xg.grad is None else xg.grad.copy()

    base = np.array(x.data, dtype=np.float64)
    numeric = np.zeros_like(base)
    with no_grad():
        for i in range(base.size):
            xp = base.copy()
            xp.flat[i] += eps
            fp = _scalar(f(Tensor(xp)))
            xm = base.copy()
            xm.flat[i] -= eps
            fm = _scalar(f(Tensor(xm)))
            numeric.flat[i] = (fp - fm) / (2 * eps)
    return _rel_err(analytic, numeric)


def grad_check_params(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Like :func:`grad_check` for a closure over several parameters.

    Parameters are perturbed in place; with ``max_coords`` set, a seeded
    subset of coordinates per parameter is checked.
    """
    for p in params:
        p.grad = None
    out = f()
    _scalar(out)
    out.backward()
    rng = Rng(seed).split("gradcheck")
    worst = 0.0
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        coords = np.arange(p.data.size)
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort(rng.split(k).choice(p.data.size, max_coords))
        num = np.empty(coords.size)
        with no_grad():
            for j, i in enumerate(coords):
                orig = p.data.flat[i]
                p.data.flat[i] = orig + eps
                fp = _scalar(f())
                p.data.flat[i] = orig - eps
                fm = _scalar(f())
                p.data.flat[i] = orig
                num[j] = (fp - fm) / (2 * eps)
        worst = max(worst, _rel_err(analytic.reshape(-1)[coords], num))
    for p in params:
        p.grad = None
    return worst
