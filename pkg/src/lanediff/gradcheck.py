"""Finite-difference verification of analytic gradients.

Checks run at float64; central differences are too noisy at float32 to
certify anything near the 1e-4 tolerance used throughout the test suite.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def grad_check(function, point, epsilon=1e-5):
    """Max relative error between analytic and central-difference gradients.

    function maps a Tensor to a scalar Tensor; point is the evaluation
    point (converted to float64). Error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    x0 = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    out = function(x)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    with ad.no_grad(), ad.finite_checks(False):
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(function(Tensor(x0.copy(), dtype=np.float64)).data)
            flat[i] = orig - epsilon
            lo = float(function(Tensor(x0.copy(), dtype=np.float64)).data)
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2.0 * epsilon)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def model_grad_check(loss_fn, named_params, epsilon=1e-5, rtol_floor=1.0):
    """Max relative error over every coordinate of every parameter.

    loss_fn() evaluates the scalar loss from the current parameter values
    (the parameters are mutated in place for the numeric passes). Expects
    float64 parameters.
    """
    for name, p in named_params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"model_grad_check requires float64 parameters ('{name}')")
        p.zero_grad()
    out = loss_fn()
    if out.size != 1:
        raise ValueError("loss_fn must return a scalar")
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in named_params.items()
    }

    worst = 0.0
    with ad.no_grad(), ad.finite_checks(False):
        for name, p in named_params.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = float(loss_fn().data)
                flat[i] = orig - epsilon
                lo = float(loss_fn().data)
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * epsilon)
                a = analytic[name].reshape(-1)[i]
                err = abs(a - numeric) / max(rtol_floor, abs(a))
                worst = max(worst, err)
    for p in named_params.values():
        p.zero_grad()
    return worst
