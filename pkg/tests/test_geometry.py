import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbdecay import geometry as geo
from mbdecay import morsebott as mb
from mbdecay.errors import DomainError


def test_gradient_1d():
    M = geo.euclidean(1)
    f = geo.ScalarField(lambda p: 0.5 * p[0] ** 2)
    assert geo.riemannian_gradient(M, f, np.array([1.0]))[0] == pytest.approx(1.0, abs=1e-8)


def test_sphere_height_gradient_at_equator():
    M = geo.sphere(3)
    f = mb.height_function()
    p = np.array([1.0, 0.0, 0.0])
    expected = (np.eye(3) - np.outer(p, p)) @ np.array([0, 0, 1.0])
    assert np.allclose(geo.riemannian_gradient(M, f, p), expected, atol=1e-14)


def test_sphere_height_gradient_at_pole_vanishes():
    g = geo.riemannian_gradient(geo.sphere(3), mb.height_function(), np.array([0, 0, 1.0]))
    assert np.linalg.norm(g) == 0.0


def test_off_manifold_point_rejected():
    with pytest.raises(DomainError):
        geo.riemannian_gradient(geo.sphere(3), mb.height_function(), np.array([0, 0, 1.1]))


def test_fd_gradient_matches_analytic():
    f = mb.circle_field()
    fd = geo.ScalarField(f.value)
    for p in ([1.2, 0.3, -0.1], [0.5, -0.7, 0.4]):
        a = f.ambient_gradient(np.array(p))
        b = fd.ambient_gradient(np.array(p))
        assert np.linalg.norm(a - b) <= 1e-5 * np.linalg.norm(a)


def test_hessian_quadratic_identity():
    M = geo.euclidean(2)
    f = geo.ScalarField(lambda p: 0.5 * (p @ p))
    assert np.allclose(geo.tangent_hessian(M, f, np.zeros(2)), np.eye(2), atol=1e-8)


def test_hessian_sphere_pole():
    H = geo.tangent_hessian(geo.sphere(3), mb.height_function(), np.array([0, 0, 1.0]))
    assert np.allclose(H, -np.eye(2), atol=1e-6)


def test_hessian_circle_field():
    M = geo.euclidean(3)
    H = geo.tangent_hessian(M, mb.circle_field(), np.array([1.0, 0, 0]), basis=np.eye(3))
    assert np.allclose(H, np.diag([-2.0, 0.0, -2.0]), atol=1e-6)


def test_hessian_rejects_noncritical():
    with pytest.raises(DomainError):
        geo.tangent_hessian(geo.sphere(3), mb.height_function(), np.array([1.0, 0, 0]))


def test_hessian_kernel_basis_independent(rng):
    M = geo.euclidean(3)
    f = mb.circle_field()
    p = np.array([0.6, 0.8, 0.0])
    dims = set()
    for _ in range(10):
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        H = geo.tangent_hessian(M, f, p, basis=Q)
        assert np.max(np.abs(H - H.T)) <= 1e-10
        dims.add(geo.kernel_dimension(H))
    assert dims == {1}


def test_coarse_distance_examples():
    assert geo.coarse_distance([0, 0, 1], [0, 0, 1]) == 0.0
    assert geo.coarse_distance([0, 0, 1], [0, 0, -1]) == 2.0
    assert geo.coarse_distance([1, 0], [0, 1]) == pytest.approx(math.sqrt(2))


unit = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.tuples(unit, unit, unit), st.tuples(unit, unit, unit))
def test_projector_idempotent_and_symmetric(p, v):
    p = np.array(p)
    if np.linalg.norm(p) < 1e-3:
        p = np.array([0.0, 0.0, 1.0])
    p = p / np.linalg.norm(p)
    P = geo.sphere(3).tangent_projector(p)
    v = np.array(v)
    assert np.linalg.norm(P @ v - P @ (P @ v)) <= 1e-12
    assert np.allclose(P, P.T, atol=1e-15)
    assert np.linalg.matrix_rank(P, tol=1e-8) == 2


@settings(max_examples=100, deadline=None)
@given(*(st.tuples(unit, unit, unit) for _ in range(3)))
def test_coarse_metric_axioms(a, b, c):
    d = geo.CHORDAL
    assert d(a, a) == 0.0
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-15
