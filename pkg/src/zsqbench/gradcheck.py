"""Finite-difference oracle for the autodiff engine."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NumericError, ParameterError
from .tensor import Tensor, backward, no_grad, reset_tape


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``f`` at ``x``, evaluated in float64."""
    if not h > 0:
        raise ParameterError(f"step h must be > 0, got {h}")
    x64 = np.array(x, dtype=np.float64)
    g = np.zeros_like(x64)
    flat, gflat = x64.reshape(-1), g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x64, dtype=np.float64)).data.sum())
            flat[i] = orig - h
            fm = float(f(Tensor(x64, dtype=np.float64)).data.sum())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value at element {i}")
            gflat[i] = (fp - fm) / (2 * h)
    return g


def autodiff_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    reset_tape()
    xt = Tensor(x, requires_grad=True, dtype=np.asarray(x).dtype)
    loss = f(xt)
    backward(loss)
    if xt.grad is None:
        return np.zeros_like(xt.data)
    if not np.all(np.isfinite(xt.grad)):
        bad = int(np.flatnonzero(~np.isfinite(xt.grad))[0])
        raise NumericError(f"non-finite autodiff gradient at element {bad}")
    return xt.grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-3) -> float:
    """Max elementwise relative error between autodiff and central differences.

    The autodiff side runs at the dtype of ``x`` (float32 normally); the
    finite-difference side re-evaluates ``f`` in float64 so that its own
    rounding error stays well below the tolerance being tested.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    ga = autodiff_gradient(f, x).astype(np.float64)
    gn = numerical_gradient(f, x, h)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)
    return float(np.max(np.abs(ga - gn) / denom))
