"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tape
from .tape import Param, Tensor, backward, zero_grads


def numeric_gradient(fn: Callable[[], Tensor], param: Param, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar-valued forward pass w.r.t. one param."""
    base = param.value.copy()
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    with tape.no_grad():
        while not it.finished:
            ij = it.multi_index
            param.value = base.copy()
            param.value[ij] += step
            up = fn().item()
            param.value = base.copy()
            param.value[ij] -= step
            down = fn().item()
            grad[ij] = (up - down) / (2.0 * step)
            it.iternext()
    param.value = base
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Param],
                    step: float = 1e-5, tol: float = 1e-5) -> float:
    """Run tape backward and compare every param adjoint to central differences.

    Returns the worst relative error; raises AssertionError above ``tol``.
    """
    zero_grads(params)
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        numeric = numeric_gradient(fn, p, step=step)
        err = max_relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch for {p.name!r}: rel err {err:.3e} > {tol:.1e}")
    zero_grads(params)
    return worst
