"""Row-independent matrix products.

BLAS picks different micro-kernels depending on the matrix shape, so the
same input row can produce a different result when it sits in a differently
sized batch.  The kernels here accumulate every output element over the inner
dimension strictly left to right, which makes each output row a function of
its input row alone.  That property carries the exact permutation-invariance
and critical-set guarantees of the whole library.
"""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _matmul_rows(a, b, out):
    n, k = a.shape
    c = b.shape[1]
    i = 0
    # four rows share each load of b; per-element order is unchanged
    while i + 4 <= n:
        for j in range(c):
            out[i, j] = 0.0
            out[i + 1, j] = 0.0
            out[i + 2, j] = 0.0
            out[i + 3, j] = 0.0
        for p in range(k):
            a0 = a[i, p]
            a1 = a[i + 1, p]
            a2 = a[i + 2, p]
            a3 = a[i + 3, p]
            for j in range(c):
                bj = b[p, j]
                out[i, j] += a0 * bj
                out[i + 1, j] += a1 * bj
                out[i + 2, j] += a2 * bj
                out[i + 3, j] += a3 * bj
        i += 4
    while i < n:
        for j in range(c):
            out[i, j] = 0.0
        for p in range(k):
            a0 = a[i, p]
            for j in range(c):
                out[i, j] += a0 * b[p, j]
        i += 1


def matmul_rows(a, b):
    """Return ``a @ b`` for 2-D float64 arrays with a fixed reduction order."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[1]))
    _matmul_rows(a, b, out)
    return out


def batched_matmul_rows(a, b):
    """Per-batch ``a[i] @ b[i]`` for ``(B, n, k)`` and ``(B, k, c)`` arrays."""
    out = np.empty((a.shape[0], a.shape[1], b.shape[2]))
    for i in range(a.shape[0]):
        ai = np.ascontiguousarray(a[i], dtype=np.float64)
        bi = np.ascontiguousarray(b[i], dtype=np.float64)
        _matmul_rows(ai, bi, out[i])
    return out
