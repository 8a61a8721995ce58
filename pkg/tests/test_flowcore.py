import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbdecay import flowcore as fc
from mbdecay import geometry as geo
from mbdecay import morsebott as mb
from mbdecay.errors import CompactnessRefusal, PreconditionError

HALF_SQUARE = geo.ScalarField(lambda p: 0.5 * p[0] ** 2, lambda p: np.array([p[0]]))


def exp_flow(n=2001, s1=1.0):
    s = np.linspace(0.0, s1, n)
    return fc.build_trajectory(geo.euclidean(1), HALF_SQUARE, s, np.exp(s)[:, None])


def constant_at_north(n=50):
    sc = mb.sphere_height()
    s = np.linspace(0, 1, n)
    pts = np.tile([0.0, 0.0, 1.0], (n, 1))
    return fc.build_trajectory(sc.M, sc.f, s, pts, limit=np.array([0.0, 0.0, 1.0]))


def test_energy_closed_form():
    assert fc.energy_of(exp_flow()) == pytest.approx((math.e**2 - 1) / 2, abs=1e-6)


def test_energy_constant_is_zero():
    assert fc.energy_of(constant_at_north()) == 0.0


def test_energy_full_heteroclinic(heteroclinic):
    assert fc.energy_of(heteroclinic) == pytest.approx(2.0, abs=1e-4)


def test_energy_action_identity(sphere_flow, circle_flow):
    for _, traj in (sphere_flow, circle_flow):
        E = fc.energy_of(traj)
        assert abs(E - (traj.f_values[-1] - traj.f_values[0])) <= 1e-4 * (1 + E)


def test_energy_divergent_tail_flagged():
    s = np.linspace(0, 40, 401)
    traj = fc.build_trajectory(geo.euclidean(1), HALF_SQUARE, s, np.exp(s)[:, None])
    assert fc.energy_of(traj) == math.inf


def test_flow_identity_residual_cases():
    assert fc.flow_identity_residual(exp_flow()) <= 1e-5
    assert fc.flow_identity_residual(constant_at_north()) <= 1e-12
    s = np.linspace(0, 1, 21)
    # (s, 0) under the height field, evaluated directly on the caches
    traj = fc.Trajectory(s, np.stack([s, 0 * s, 0 * s], 1), np.zeros_like(s), np.ones_like(s))
    assert fc.flow_identity_residual(traj) >= 0.1


def test_flow_identity_needs_three_nodes():
    traj = fc.Trajectory([0.0, 1.0], [[0.0], [1.0]], [0.0, 0.5], [0.0, 1.0])
    with pytest.raises(PreconditionError):
        fc.flow_identity_residual(traj)


def test_shift_invariance_exact():
    traj = exp_flow(201)
    moved = traj.shifted(3.7)
    assert fc.energy_of(moved) == pytest.approx(fc.energy_of(traj), rel=1e-14)
    assert fc.flow_identity_residual(moved) == pytest.approx(fc.flow_identity_residual(traj), rel=1e-9)


def test_spectral_gap_examples():
    assert fc.spectral_gap([-1.0], 1.0) == 2.0
    vals = [0.0, 4 * math.pi, 9 * math.pi]
    assert fc.spectral_gap(vals, math.pi, "positive") == pytest.approx(math.pi)
    assert fc.spectral_gap(vals, math.pi, "negative") == pytest.approx(3 * math.pi)
    assert fc.spectral_gap(vals, math.pi, "ordinary") == pytest.approx(math.pi)
    for mode in ("positive", "negative", "ordinary"):
        assert fc.spectral_gap([], 0.0, mode) == math.inf
    with pytest.raises(ValueError):
        fc.spectral_gap([1.0], 0.0, "sideways")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-10, 10))
def test_spectral_gap_monotone_under_removal(vals, zeta):
    for mode in ("positive", "negative"):
        assert fc.spectral_gap(vals[1:], zeta, mode) >= fc.spectral_gap(vals, zeta, mode)


def test_uniform_distance_examples(sphere_flow):
    _, traj = sphere_flow
    assert fc.uniform_distance(traj, traj) == 0.0
    s = np.linspace(0, 1, 5)
    a = fc.Trajectory(s, np.tile([0, 0, 1.0], (5, 1)), s, s, limit=np.array([0, 0, 1.0]))
    b = fc.Trajectory(s, np.tile([0, 0, -1.0], (5, 1)), s, s, limit=np.array([0, 0, -1.0]))
    assert fc.uniform_distance(a, b) == 2.0


def test_uniform_distance_shrinks_with_shift(sphere_flow):
    _, traj = sphere_flow
    ds = [fc.uniform_distance(traj, traj.restricted(h)) for h in (1.0, 0.5, 0.25, 0.1)]
    assert ds[0] > 0
    assert all(b < a for a, b in zip(ds, ds[1:]))


def test_uniform_distance_without_limit_warns():
    traj = exp_flow(11)
    with pytest.warns(fc.IncompleteLimitWarning):
        assert fc.uniform_distance(traj, traj) == 0.0


def test_uniform_distance_pseudometric(sphere_flow):
    _, traj = sphere_flow
    fam = [traj.restricted(h) for h in (0.0, 0.3, 0.9)]
    d = fc.uniform_distance
    for x in fam:
        for y in fam:
            assert d(x, y) == d(y, x)
            for z in fam:
                assert d(x, z) <= d(x, y) + d(y, z) + 1e-15


def test_distance_matrix_matches_pairwise(sphere_flow):
    _, traj = sphere_flow
    fam = [traj.restricted(h) for h in (0.0, 0.2, 0.7)]
    mat = fc.distance_matrix(fam)
    for i in range(3):
        for j in range(3):
            assert mat[i, j] == pytest.approx(fc.uniform_distance(fam[i], fam[j]), abs=1e-14)


def sphere_family(E0=1.9, n=10):
    sc = mb.sphere_height()
    members = []
    for th in np.linspace(0.3, 1.2, n):
        tr = mb.integrate_gradient_flow(sc.M, sc.f, mb.meridian_point(th), 40.0)
        members.append(mb.with_limit(tr, sc.Z))
    return sc, fc.ModuliFamily(members, E0)


def test_compactness_certificate_passes():
    sc, fam = sphere_family()
    gap = fc.spectral_gap(sc.critical_values, sc.Z.zeta)
    rep = fc.compactness_certificate(fam, sc.Z, gap=gap, r=0.5)
    assert rep.passed
    assert math.isfinite(rep.s0)
    assert not rep.window_violations and not rep.energy_violations


def test_compactness_single_member():
    sc, fam = sphere_family(n=1)
    rep = fc.compactness_certificate(fam, sc.Z, r=0.5)
    assert rep.passed
    assert rep.s0 == fc.entry_time(fam.members[0], sc.Z, 0.5)


def test_compactness_refused_at_gap(heteroclinic):
    sc = mb.sphere_height()
    fam = fc.ModuliFamily([heteroclinic, heteroclinic.shifted(1.0)], 2.0)
    with pytest.raises(CompactnessRefusal):
        fc.compactness_certificate(fam, sc.Z, gap=fc.spectral_gap(sc.critical_values, 1.0))


def test_delta_estimate_cap():
    sc, fam = sphere_family(n=6)
    delta = fc.delta_neighborhood_estimate(fam, lambda p: p[2] > 0.9, 1.0)
    # sampling of the flow lines near z = 0.9 sets the resolution
    spacing = max(np.max(np.abs(np.diff(m.f_values))) for m in fam.members)
    assert abs(delta - 0.1) <= spacing


def test_delta_estimate_trivial_sets():
    sc, fam = sphere_family(n=3)
    top = max(float(np.max(1.0 - m.f_values)) for m in fam.members)
    assert fc.delta_neighborhood_estimate(fam, lambda p: True, 1.0) == pytest.approx(top)
    assert fc.delta_neighborhood_estimate(fam, lambda p: p[2] < 0.99, 1.0) == 0.0


def test_shortening_bound_morse_case(sphere_flow):
    sc, traj = sphere_flow
    fit = mb.fit_exponential_decay(traj, traj.limit, zeta=1.0)
    fam = fc.ModuliFamily([traj], 1.9)
    cap = lambda p: p[2] > 0.9
    # sqrt(1 - z) carries an absolute rounding error ~ sqrt(eps) near the pole
    tol = fit.A_hat * math.sqrt(np.finfo(float).eps)
    xi = lambda p: fit.A_hat * math.sqrt(abs(1.0 - p[2]))
    rep = fc.shortening_bound_check(fam, xi, cap, Z=sc.Z, tol=tol)
    assert rep.passed and rep.checked_nodes > 0
    rep0 = fc.shortening_bound_check(fam, lambda p: 0.0, cap)
    assert not rep0.passed and rep0.worst_slack > 0


def test_shortening_constant_member():
    sc = mb.sphere_height()
    fam = fc.ModuliFamily([constant_at_north()], 1.0)
    rep = fc.shortening_bound_check(fam, lambda p: 0.0, lambda p: True, Z=sc.Z)
    assert rep.passed and rep.worst_slack == 0.0


def test_shortening_rejects_xi_nonzero_on_z():
    sc = mb.sphere_height()
    fam = fc.ModuliFamily([constant_at_north()], 1.0)
    with pytest.raises(PreconditionError):
        fc.shortening_bound_check(fam, lambda p: 1.0, lambda p: True, Z=sc.Z)


def test_critical_set_validation():
    sc = mb.sphere_height()
    sc.Z.validate(sc.M, sc.f)
    bad = fc.CriticalSetSample([[1.0, 0, 0]], 1.0)
    with pytest.raises(PreconditionError):
        bad.validate(sc.M, sc.f)
