import os
import subprocess
import sys

import numpy as np
import pytest

from mbdecay import _kernels as K

numba_only = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba path disabled")


@pytest.fixture
def blocks(rng):
    return rng.standard_normal((16, 3, 2))


def test_pointwise_to_dense_layout(blocks):
    out = K._pointwise_to_dense_np(blocks)
    assert out.shape == (48, 32)
    assert out[1 * 16 + 5, 0 * 16 + 5] == blocks[5, 1, 0]
    assert out[1 * 16 + 5, 0 * 16 + 6] == 0.0


def test_pointwise_times_diff_matches_kron(rng):
    N = 12
    b = rng.standard_normal((N, 2, 2))
    D = rng.standard_normal((N, N))
    ref = K._pointwise_to_dense_np(b) @ np.kron(np.eye(2), D)
    assert np.allclose(K._pointwise_times_diff_np(b, D), ref, atol=1e-13)


def test_fill_banded_roundtrip(rng):
    n, lo, up = 8, 2, 2
    A = np.zeros((n, n))
    ab = np.zeros((lo + up + 1, n))
    for r0 in range(0, n - 2, 2):
        blk = rng.standard_normal((2, 3)) if r0 + 3 <= n else rng.standard_normal((2, 2))
        c0 = r0
        A[r0:r0 + blk.shape[0], c0:c0 + blk.shape[1]] = blk
        K._fill_banded_np(ab, blk, r0, c0, up)
    dense = np.zeros_like(A)
    for j in range(n):
        for i in range(max(0, j - up), min(n, j + lo + 1)):
            dense[i, j] = ab[up + i - j, j]
    assert np.array_equal(dense, A)


def test_cumulative_trapezoid_exact_on_lines():
    x = np.linspace(0, 2, 11)
    assert np.allclose(K._cumulative_trapezoid_np(3 * x, x), 1.5 * x**2)


@numba_only
@pytest.mark.parametrize("name", ["pointwise_to_dense", "sup_distance_matrix"])
def test_numba_matches_numpy_single_arg(name, rng):
    arg = rng.standard_normal((7, 11, 3))
    nb = getattr(K, f"_{name}_nb")(np.ascontiguousarray(arg))
    npv = getattr(K, f"_{name}_np")(arg)
    assert np.allclose(nb, npv, rtol=1e-13, atol=1e-13)


@numba_only
def test_numba_matches_numpy_other_kernels(rng):
    b = rng.standard_normal((10, 2, 2))
    D = rng.standard_normal((10, 10))
    assert np.allclose(K._pointwise_times_diff_nb(b, D), K._pointwise_times_diff_np(b, D), atol=1e-13)
    x = np.sort(rng.uniform(0, 1, 30))
    y = rng.standard_normal(30)
    assert np.allclose(K._cumulative_trapezoid_nb(y, x), K._cumulative_trapezoid_np(y, x), atol=1e-14)
    blk = rng.standard_normal((4, 5))
    a1 = np.zeros((12, 20))
    a2 = np.zeros((12, 20))
    K._fill_banded_nb(a1, blk, 3, 2, 6)
    K._fill_banded_np(a2, blk, 3, 2, 6)
    assert np.array_equal(a1, a2)


def test_env_flag_selects_numpy_path():
    env = dict(os.environ, MBDECAY_PURE_NUMPY="1")
    out = subprocess.run(
        [sys.executable, "-c", "from mbdecay import _kernels; print(_kernels.HAS_NUMBA)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "False"
