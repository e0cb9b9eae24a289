"""Oracles shared across test modules.

Kept independent of the code paths they check: the finite-difference
gradient only calls the forward pass, and the edit-distance oracle is a
plain memoized recursion with no alignment bookkeeping.
"""

import numpy as np


def finite_difference_grad(forward, x, h=1e-5):
    """Central-difference gradient of a scalar-valued forward() w.r.t. x.

    `x` is mutated in place one coordinate at a time; forward() must rebuild
    its computation from the current contents of `x` on every call.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = forward()
        flat[i] = orig - h
        fm = forward()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol, atol=1e-7):
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def edit_distance_oracle(a, b):
    """Unit-cost Levenshtein distance by memoized recursion."""
    from functools import lru_cache

    a = tuple(a)
    b = tuple(b)

    @lru_cache(maxsize=None)
    def dist(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        sub = dist(i - 1, j - 1) + (a[i - 1] != b[j - 1])
        return min(sub, dist(i, j - 1) + 1, dist(i - 1, j) + 1)

    return dist(len(a), len(b))
