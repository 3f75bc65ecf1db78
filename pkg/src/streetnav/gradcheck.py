"""Finite-difference gradient verification for scalar-valued functions."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import GradCheckError
from .tensor import Tensor


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-4,
    max_coords_per_param: int = 24,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be a deterministic zero-arg closure over ``params`` that
    returns a scalar tensor.  Parameters are promoted to float64 for the
    check and restored afterwards.  Stochastic functions (e.g. with dropout
    enabled) are rejected: two evaluations must agree bit-for-bit.
    """
    originals = {name: p.data for name, p in params.items()}
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
            p.grad = None
        first = fn()
        if first.data.size != 1:
            raise GradCheckError("grad_check requires a scalar-valued function")
        second = fn()
        if not np.array_equal(first.data, second.data):
            raise GradCheckError("function is not deterministic (dropout enabled?)")
        if not np.isfinite(first.data):
            raise GradCheckError("function value is not finite")

        value = fn()
        value.backward()
        analytic = {
            name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
            for name, p in params.items()
        }

        rng = np.random.default_rng(seed)
        max_err = 0.0
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            coords = np.arange(n) if n <= max_coords_per_param else rng.choice(
                n, size=max_coords_per_param, replace=False
            )
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                f_plus = float(fn().data)
                flat[c] = orig - h
                f_minus = float(fn().data)
                flat[c] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                if not np.isfinite(numeric):
                    raise GradCheckError(f"non-finite difference quotient at {name}[{c}]")
                ana = float(analytic[name].reshape(-1)[c])
                err = abs(numeric - ana) / max(abs(numeric) + abs(ana), 1e-6)
                max_err = max(max_err, err)
        return max_err
    finally:
        for name, p in params.items():
            p.data = originals[name]
            p.grad = None
