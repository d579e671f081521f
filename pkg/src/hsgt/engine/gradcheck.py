"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from hsgt.engine.tensor import Parameter, Tensor, no_grad
from hsgt.errors import InputError, NumericError


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tolerance: float | None = None,
    floor: float = 1e-8,
) -> float:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``; it is
    re-evaluated with each coordinate nudged by ``+-eps`` in place. The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.

    Returns:
        The maximum relative error over all coordinates.

    Raises:
        NumericError: ``f`` is non-finite, or the error exceeds ``tolerance``.
    """
    if eps <= 0:
        raise InputError("finite_difference_check: eps must be positive")
    for p in params:
        if p.data.dtype != np.float64:
            raise InputError("finite_difference_check: double precision required")
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_difference_check: f is non-finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                up = float(f().data)
                flat[i] = original - eps
                down = float(f().data)
                flat[i] = original
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError("finite_difference_check: f is non-finite")
                numeric = (up - down) / (2.0 * eps)
                denom = max(abs(gflat[i]), abs(numeric), floor)
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    for p in params:
        if isinstance(p, Parameter):
            p.grad = None
    if tolerance is not None and worst > tolerance:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}")
    return worst
