"""Loop-shaped numerical kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and the environment variable
``MBDECAY_PURE_NUMPY`` is unset or ``0``.  Both paths return identical
arrays up to floating point summation order.
"""
import os

import numpy as np

_FLAG = os.environ.get("MBDECAY_PURE_NUMPY", "0").strip().lower()
_WANT_NUMBA = _FLAG in ("", "0", "false", "no")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------- numpy path


def _pointwise_to_dense_np(blocks):
    n, a, b = blocks.shape
    out = np.zeros((a * n, b * n))
    idx = np.arange(n)
    for i in range(a):
        for j in range(b):
            out[i * n + idx, j * n + idx] = blocks[:, i, j]
    return out


def _pointwise_times_diff_np(blocks, dmat):
    n, a, b = blocks.shape
    out = blocks.transpose(1, 0, 2)[:, :, :, None] * dmat[None, :, None, :]
    return out.reshape(a * n, b * n)


def _sup_distance_matrix_np(paths):
    k = paths.shape[0]
    out = np.zeros((k, k))
    for i in range(k):
        diff = paths[i + 1:] - paths[i][None]
        if diff.shape[0]:
            d = np.sqrt((diff * diff).sum(axis=2)).max(axis=1)
            out[i, i + 1:] = d
            out[i + 1:, i] = d
    return out


def _cumulative_trapezoid_np(y, x):
    out = np.zeros_like(y, dtype=float)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


def _fill_banded_np(ab, block, r0, c0, upper):
    rows, cols = block.shape
    i, j = np.meshgrid(np.arange(rows) + r0, np.arange(cols) + c0, indexing="ij")
    ab[upper + i - j, j] = block


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _pointwise_to_dense_nb(blocks):
        n, a, b = blocks.shape
        out = np.zeros((a * n, b * n))
        for t in range(n):
            for i in range(a):
                for j in range(b):
                    out[i * n + t, j * n + t] = blocks[t, i, j]
        return out

    @njit(cache=True)
    def _pointwise_times_diff_nb(blocks, dmat):
        n, a, b = blocks.shape
        out = np.empty((a * n, b * n))
        for i in range(a):
            for t in range(n):
                for j in range(b):
                    c = blocks[t, i, j]
                    for u in range(n):
                        out[i * n + t, j * n + u] = c * dmat[t, u]
        return out

    @njit(cache=True)
    def _sup_distance_matrix_nb(paths):
        k, m, dim = paths.shape
        out = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                best = 0.0
                for t in range(m):
                    acc = 0.0
                    for c in range(dim):
                        d = paths[i, t, c] - paths[j, t, c]
                        acc += d * d
                    if acc > best:
                        best = acc
                best = np.sqrt(best)
                out[i, j] = best
                out[j, i] = best
        return out

    @njit(cache=True)
    def _cumulative_trapezoid_nb(y, x):
        out = np.zeros(y.shape[0])
        for i in range(1, y.shape[0]):
            out[i] = out[i - 1] + 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1])
        return out

    @njit(cache=True)
    def _fill_banded_nb(ab, block, r0, c0, upper):
        rows, cols = block.shape
        for i in range(rows):
            for j in range(cols):
                ab[upper + (i + r0) - (j + c0), j + c0] = block[i, j]


# ---------------------------------------------------------------- dispatch


def pointwise_to_dense(blocks):
    """Dense matrix of a pointwise field of (a, b) blocks on N nodes.

    Flattening is component-major: entry ``(i*N + t, j*N + t)`` holds
    ``blocks[t, i, j]``.
    """
    blocks = np.ascontiguousarray(blocks, dtype=float)
    if HAS_NUMBA:
        return _pointwise_to_dense_nb(blocks)
    return _pointwise_to_dense_np(blocks)


def pointwise_times_diff(blocks, dmat):
    """Dense matrix of ``M(t) @ kron(I_b, dmat)`` for a pointwise field M."""
    blocks = np.ascontiguousarray(blocks, dtype=float)
    dmat = np.ascontiguousarray(dmat, dtype=float)
    if HAS_NUMBA:
        return _pointwise_times_diff_nb(blocks, dmat)
    return _pointwise_times_diff_np(blocks, dmat)


def sup_distance_matrix(paths):
    """Pairwise max-over-nodes Euclidean distances of K sampled paths (K, T, m)."""
    paths = np.ascontiguousarray(paths, dtype=float)
    if HAS_NUMBA:
        return _sup_distance_matrix_nb(paths)
    return _sup_distance_matrix_np(paths)


def cumulative_trapezoid(y, x):
    """Running trapezoid integral, starting at 0."""
    y = np.ascontiguousarray(y, dtype=float)
    x = np.ascontiguousarray(x, dtype=float)
    if HAS_NUMBA:
        return _cumulative_trapezoid_nb(y, x)
    return _cumulative_trapezoid_np(y, x)


def fill_banded(ab, block, r0, c0, upper):
    """Write a dense block at (r0, c0) into LAPACK banded storage ``ab`` in place."""
    block = np.ascontiguousarray(block, dtype=float)
    if HAS_NUMBA:
        _fill_banded_nb(ab, block, int(r0), int(c0), int(upper))
    else:
        _fill_banded_np(ab, block, int(r0), int(c0), int(upper))
