"""Independent numerical oracles used across the test suite.

The gradient oracle evaluates functions through the public forward API only,
so it stays independent of the backward implementation it checks.
"""

import numpy as np


def finite_difference_grad(f, arrays, wrt, eps=1e-5, sample=None, rng=None):
    """Central finite-difference gradient of scalar ``f(*arrays)``.

    ``wrt`` is the index of the array to differentiate.  With ``sample`` set,
    only that many randomly chosen entries are probed (returned as a list of
    (index, derivative) pairs); otherwise the full gradient array is built.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    target = arrays[wrt]

    def probe(idx):
        bumped = [a.copy() for a in arrays]
        bumped[wrt][idx] += eps
        hi = float(f(*bumped))
        bumped[wrt][idx] -= 2 * eps
        lo = float(f(*bumped))
        return (hi - lo) / (2 * eps)

    if sample is not None:
        rng = rng or np.random.default_rng(0)
        flat_indices = rng.choice(target.size, size=min(sample, target.size), replace=False)
        return [
            (np.unravel_index(fi, target.shape), probe(np.unravel_index(fi, target.shape)))
            for fi in flat_indices
        ]
    grad = np.zeros_like(target)
    for fi in range(target.size):
        idx = np.unravel_index(fi, target.shape)
        grad[idx] = probe(idx)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def reference_cross_correlate(x, k, stride=1, pad=0):
    """Direct-loop cross-correlation oracle (NHWC input, (kh,kw,cin,cout) kernel)."""
    b, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    y = np.zeros((b, oh, ow, cout))
    for bi in range(b):
        for i in range(oh):
            for j in range(ow):
                patch = xp[bi, i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                for co in range(cout):
                    y[bi, i, j, co] = np.sum(patch * k[:, :, :, co])
    return y
