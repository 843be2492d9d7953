"""Dense kernels with a numba path and a pure-numpy fallback.

Set ``VFLMID_NO_NUMBA=1`` before import to force the numpy path. The numba
kernels reduce strictly left-to-right so results are bit-reproducible across
runs; the numpy path defers to BLAS and is only reproducible on a fixed
machine/thread configuration.
"""
import os

import numpy as np

try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("VFLMID_NO_NUMBA", "0") not in ("1", "true", "yes")


def _nb_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def _nb_matmul_tn(a, b):
    # a.T @ b
    k, n = a.shape
    m = b.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[p, i] * b[p, j]
            out[i, j] = s
    return out


def _nb_matmul_nt(a, b):
    # a @ b.T
    n, k = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[j, p]
            out[i, j] = s
    return out


def _nb_joint_counts(a, b, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    for i in range(a.shape[0]):
        out[a[i], b[i]] += 1
    return out


def _np_matmul(a, b):
    return a @ b


def _np_matmul_tn(a, b):
    return a.T @ b


def _np_matmul_nt(a, b):
    return a @ b.T


def _np_joint_counts(a, b, na, nb):
    out = np.zeros((na, nb), dtype=np.int64)
    np.add.at(out, (a, b), 1)
    return out


if USE_NUMBA:
    _mm = njit(cache=True)(_nb_matmul)
    _mm_tn = njit(cache=True)(_nb_matmul_tn)
    _mm_nt = njit(cache=True)(_nb_matmul_nt)
    _jc = njit(cache=True)(_nb_joint_counts)

    def matmul(a, b):
        return _mm(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))

    def matmul_tn(a, b):
        return _mm_tn(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))

    def matmul_nt(a, b):
        return _mm_nt(np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64))

    def joint_counts(a, b, na, nb):
        return _jc(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64), int(na), int(nb))
else:
    matmul = _np_matmul
    matmul_tn = _np_matmul_tn
    matmul_nt = _np_matmul_nt
    joint_counts = _np_joint_counts

# numpy versions, always available for the benchmark and tests.
numpy_matmul = _np_matmul
numpy_matmul_tn = _np_matmul_tn
numpy_matmul_nt = _np_matmul_nt
numpy_joint_counts = _np_joint_counts
