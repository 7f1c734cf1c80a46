"""Shared test oracles: central finite differences and gradient comparison."""

import numpy as np


def fd_gradient(f, params, h=1e-6, keys=None):
    """Central-difference gradient of ``f(params) -> float`` w.r.t. each array.

    ``params`` is a dict of float64 arrays mutated in place during probing
    and restored afterwards.  ``keys`` restricts differentiation to a subset.
    """
    grads = {}
    for key in keys if keys is not None else params:
        arr = params[key]
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            fp = f(params)
            flat[i] = orig - step
            fm = f(params)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads[key] = grad
    return grads


def max_relative_error(analytic, numeric, atol=1e-7):
    """Worst-coordinate relative disagreement, ignoring sub-``atol`` noise."""
    worst = 0.0
    for key in numeric:
        a = np.asarray(analytic[key], dtype=np.float64)
        b = np.asarray(numeric[key], dtype=np.float64)
        diff = np.abs(a - b)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol / 1e-4)
        worst = max(worst, float((diff / denom).max()))
    return worst


def assert_gradients_close(analytic, numeric, rtol=1e-4, atol=1e-7, label=""):
    err = max_relative_error(analytic, numeric, atol=atol)
    assert err <= rtol, f"{label} gradient mismatch: max relative error {err:.3e} > {rtol}"
