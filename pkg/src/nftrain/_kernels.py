"""Low-level array kernels behind the tensor ops.

Convolution is direct cross-correlation realized as im2col + matmul.  The
im2col gather (with padding fused in) is the memory-bound part, so it is
JIT-compiled with numba when available; a pure-numpy strided fallback keeps
the package importable without a compiler.  Both paths produce identical
column matrices.

All kernels use a fixed reduction order, so results are reproducible at a
given thread count.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def _im2col_numpy(x, kh, kw, stride, pad, out):
    b, h, w, c = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    s = xp.strides
    win = as_strided(
        xp,
        (b, oh, ow, kh, kw, c),
        (s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
    )
    out[:] = win.reshape(b * oh * ow, kh * kw * c)
    return out


if HAVE_NUMBA:

    @njit(parallel=True, fastmath=True, cache=True, nogil=True)
    def _im2col_numba(x, kh, kw, stride, pad, out):  # pragma: no cover - jitted
        b, h, w, c = x.shape
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        for r in prange(b * oh):
            bi = r // oh
            ohi = r % oh
            row0 = r * ow
            for khi in range(kh):
                ih = ohi * stride + khi - pad
                inside_h = 0 <= ih < h
                for kwi in range(kw):
                    col = (khi * kw + kwi) * c
                    for owi in range(ow):
                        iw = owi * stride + kwi - pad
                        row = row0 + owi
                        if inside_h and 0 <= iw < w:
                            out[row, col : col + c] = x[bi, ih, iw, :]
                        else:
                            out[row, col : col + c] = 0.0
        return out

    _im2col_impl = _im2col_numba
else:
    _im2col_impl = _im2col_numpy


def im2col(x, kh, kw, stride, pad):
    """Column matrix of all (kh, kw) windows of NHWC input ``x``.

    Returns (cols, oh, ow) with cols of shape (b*oh*ow, kh*kw*c); positions
    outside the zero-padded border contribute zeros.
    """
    b, h, w, c = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((b * oh * ow, kh * kw * c), dtype=x.dtype)
    _im2col_impl(np.ascontiguousarray(x), kh, kw, stride, pad, out)
    return out, oh, ow


def dilate2d(x, stride):
    """Insert ``stride - 1`` zeros between neighbouring spatial elements."""
    if stride == 1:
        return x
    b, h, w, c = x.shape
    out = np.zeros((b, (h - 1) * stride + 1, (w - 1) * stride + 1, c), dtype=x.dtype)
    out[:, ::stride, ::stride, :] = x
    return out
