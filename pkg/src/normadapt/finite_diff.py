"""Central finite-difference gradients, independent of the tape engine.

Used as the reference oracle for gradient checks; only ever calls the
scalar function under test, never its analytic backward.
"""

import numpy as np


def central_difference(f, arrays, step=1e-5):
    """Gradient of scalar f(arrays) w.r.t. each array by central differences.

    Arrays are perturbed in place one element at a time and restored, so f
    must read them fresh on every call. float64 inputs expected.
    """
    grads = []
    for a in arrays:
        flat = a.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(arrays))
            flat[i] = orig - step
            f_minus = float(f(arrays))
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g.reshape(a.shape))
    return grads


def max_relative_error(analytic, numeric):
    """max |a - n| scaled by the largest magnitude seen (floored at 1)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale
