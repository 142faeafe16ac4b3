"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, get_dtype, no_grad


def numerical_grad(f: Callable[[], Tensor], param: Tensor, eps: float, coords=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``param`` (in place perturbation)."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    analytic: Mapping[int, np.ndarray] | Sequence[np.ndarray] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and finite-difference gradients.

    ``f`` is called with no arguments and must return a scalar tensor that
    depends on ``params``.  The error for each parameter is
    ``|a - n| / max(|a|, |n|, 1e-10)`` measured in the 2-norm over the
    checked coordinates.  ``analytic`` replaces the backward-pass gradients
    (used to self-test the harness).  ``max_coords`` restricts the check to a
    random subset of coordinates per parameter.
    """
    if get_dtype() != np.float64:
        raise RuntimeError("grad_check needs the engine in float64 mode")
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        out = f()
        if out.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        out.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    else:
        analytic = list(analytic)
    rng = rng or np.random.default_rng(0)

    worst = 0.0
    for p, a in zip(params, analytic):
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        n = numerical_grad(f, p, eps, coords)
        a_sel = a.reshape(-1) if coords is None else a.reshape(-1)[coords]
        n_sel = n.reshape(-1) if coords is None else n.reshape(-1)[coords]
        diff = np.linalg.norm(a_sel - n_sel)
        scale = max(np.linalg.norm(a_sel), np.linalg.norm(n_sel), 1e-10)
        worst = max(worst, float(diff / scale))
    return worst
