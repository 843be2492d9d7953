import numpy as np
import pytest

from vflmid import kernels
from vflmid.diffcore import Rng


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 2), (17, 9, 33)])
def test_matmul_variants_agree_with_numpy(shape):
    n, k, m = shape
    r = Rng(0)
    a, b = r.normal((n, k)), r.normal((k, m))
    assert np.allclose(kernels.matmul(a, b), a @ b, rtol=1e-13, atol=1e-13)
    assert np.allclose(kernels.matmul_tn(a.T.copy(), b), a @ b, rtol=1e-13, atol=1e-13)
    assert np.allclose(kernels.matmul_nt(a, b.T.copy()), a @ b, rtol=1e-13, atol=1e-13)
    assert np.allclose(kernels.numpy_matmul(a, b), kernels.matmul(a, b), rtol=1e-13, atol=1e-13)


def test_matmul_accepts_non_contiguous_views():
    a = Rng(1).normal((6, 8))[:, ::2]
    b = Rng(2).normal((4, 3))
    assert np.allclose(kernels.matmul(a, b), a @ b)


@pytest.mark.skipif(not kernels.USE_NUMBA, reason="numpy path defers to BLAS ordering")
def test_compiled_matmul_is_left_to_right():
    # 1e16 + 1 - 1e16 in order loses the 1; pairwise or blocked summation could keep it
    a = np.array([[1e16, 1.0, -1e16]])
    b = np.ones((3, 1))
    expected = (1e16 + 1.0) - 1e16
    assert kernels.matmul(a, b)[0, 0] == expected


def test_joint_counts_both_paths():
    r = Rng(3)
    a, b = r.integers(0, 4, 500), r.integers(0, 3, 500)
    ref = np.zeros((4, 3), dtype=np.int64)
    for i, j in zip(a, b):
        ref[i, j] += 1
    assert np.array_equal(kernels.joint_counts(a, b, 4, 3), ref)
    assert np.array_equal(kernels.numpy_joint_counts(a, b, 4, 3), ref)
