"""Shared test oracles.

The finite-difference checker here is the independent gradient oracle: it
only ever calls the forward pass, so it cannot inherit a bug from the
backward code it is checking.
"""

import numpy as np


def numeric_grad(f, arrays, eps=1e-4):
    """Central-difference gradients of the scalar f() w.r.t. each array.

    `f` must recompute the loss from the current contents of `arrays`
    (perturbed in place, then restored).
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = a[ix]
            a[ix] = old + eps
            fp = f()
            a[ix] = old - eps
            fm = f()
            a[ix] = old
            g[ix] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """Max elementwise relative error, floored to absorb FD noise near zero.

    Equivalent to checking |a - n| <= rtol*max(|a|,|n|) + atol with
    atol = rtol*floor; floor=1e-3 with rtol 1e-4 gives atol 1e-7.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    num = np.abs(analytic - numeric)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((num / den).max()) if num.size else 0.0
