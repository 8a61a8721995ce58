"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``python3 tests/test_acceptance.py`` for the summary alone.
"""
import math
import sys
import time

import numpy as np
import pytest

from mbdecay import flowcore as fc
from mbdecay import floerlab as fl
from mbdecay import loopfield as lf
from mbdecay import morsebott as mb

LAM1 = 4 * math.pi


def philox(seed=20240611):
    return np.random.Generator(np.random.Philox(seed))


def circle_start(rng, offset):
    phi, a = rng.uniform(0, 2 * math.pi, 2)
    r = 1 + offset * math.cos(a)
    return np.array([r * math.cos(phi), r * math.sin(phi), offset * math.sin(a)])


# ------------------------------------------------------------ criteria
# each returns (passed, detail)


def energy_action_identity():
    worst = 0.0
    sph = mb.sphere_height()
    circ = mb.circle_morse_bott()
    flows = [mb.integrate_gradient_flow(sph.M, sph.f, mb.meridian_point(th), 40.0) for th in (0.5, 1.5, 2.5)]
    rng = philox(1)
    flows += [mb.integrate_gradient_flow(circ.M, circ.f, circle_start(rng, 0.2), 15.0) for _ in range(3)]
    for tr in flows:
        E = fc.energy_of(tr)
        worst = max(worst, abs(E - (tr.f_values[-1] - tr.f_values[0])) / (1 + E))
    return worst <= 1e-4, f"max |E - df|/(1+E) = {worst:.2e} (tol 1e-4)"


def spectral_gap_oracle():
    sph = mb.sphere_height()
    g_sphere = fc.spectral_gap(sph.critical_values, sph.Z.zeta)
    acts = fl.radial_orbit_actions(fl.radial_model(), 3)
    zeta = acts[1]
    g_floer = fc.spectral_gap(np.delete(acts, 1), zeta, "positive")
    ok = g_sphere == 2.0 and abs(g_floer - math.pi) <= 1e-9
    return ok, f"sphere gap {g_sphere!r}; radial gap - pi = {g_floer - math.pi:.1e} (tol 1e-9)"


def morse_bott_decay():
    sc = mb.circle_morse_bott()
    rng = philox(3)
    worst_B, worst_rate, violations = 0.0, 0.0, 0
    for _ in range(4):
        tr = mb.with_limit(mb.integrate_gradient_flow(sc.M, sc.f, circle_start(rng, 0.05), 15.0), sc.Z)
        fit = mb.fit_exponential_decay(tr, tr.limit, zeta=0.0)
        rep = mb.check_decay_bound(tr, fit, 0.0)
        worst_B = max(worst_B, abs(fit.B_hat - 2.0) / 2.0)
        worst_rate = max(worst_rate, rep.rate_agreement)
        violations += len(rep.violations)
    ok = worst_B <= 0.05 and worst_rate <= 0.1 and violations == 0
    return ok, f"|B-2|/2 = {worst_B:.2e} (5%), derivative rate mismatch {worst_rate:.2e} (10%), bound violations {violations}"


def weighted_norms():
    s = np.linspace(0, 20, 20001)
    u = np.exp(-2 * s)
    v = mb.weighted_sobolev_norm(u, s, mb.WeightedNormSpec(1.0))
    flags = [mb.weighted_sobolev_norm(u, s, mb.WeightedNormSpec(d)) for d in (2.0, 2.5, 3.0)]
    ok = abs(v - 1 / math.sqrt(2)) <= 1e-3 and all(math.isinf(f) for f in flags)
    return ok, f"norm - 1/sqrt2 = {v - 1 / math.sqrt(2):.1e} (tol 1e-3); divergence flags {flags}"


def noncompactness_witness():
    rep = mb.shift_family_diagnostic(mb.sphere_heteroclinic(), [1, 2, 4, 8])
    ok = rep.window_monotone and min(rep.full_distances) >= 1.0
    w = ", ".join(f"{x:.3g}" for x in rep.window_distances)
    return ok, f"window distances [{w}], min full-line distance {min(rep.full_distances):.3g} (>= 1)"


def operator_facts():
    _, chart, A0, split = fl.radial_setup(128)
    rng = philox(6)
    t = np.arange(128) / 128
    Ax = []
    for _ in range(3):
        a = rng.uniform(-0.05, 0.05, (2, 2))
        x = np.outer(np.sin(2 * math.pi * t), a[0]) + np.outer(np.cos(2 * math.pi * t), a[1])
        Ax.append(lf.build_operator_A(lf.LoopGrid(x, 1), chart))
    rep = lf.check_operator_facts(split, A0, Ax, lf.derivative_matrix(128, 2), 100, rng)
    split2 = fl.radial_setup(256)[3]

    def low(sp):
        lam = sp.eigenvalues
        return np.sort(lam[np.argsort(np.abs(lam))[:10]])

    drift = float(np.max(np.abs(low(split) - low(split2))))
    res_ok = all(v <= 1e-8 * A0.norm() for v in rep.residuals.values())
    ok = (
        rep.self_adjoint_residual <= 1e-6
        and split.kernel_dim == 1
        and res_ok
        and rep.coercivity_violations == 0
        and drift <= 1e-6
    )
    res = ", ".join(f"{k} {v:.1e}" for k, v in rep.residuals.items())
    return ok, (
        f"self-adjoint {rep.self_adjoint_residual:.1e}, kernel {split.kernel_dim}, {res} "
        f"(tol {1e-8 * A0.norm():.1e}), coercivity misses {rep.coercivity_violations}, doubling drift {drift:.1e}"
    )


def hadamard_factorization():
    chart = fl.TubularChart(fl.radial_model())
    rng = philox(7)
    q = np.stack([rng.uniform(0, 1, 50), rng.uniform(-0.3, 0.3, 50)], -1)
    F = chart.F(q)
    S = lf.hadamard_factor(chart.F, q, 1)
    res = float(np.max(np.abs(F - np.einsum("kij,kj->ki", S, q[:, 1:])) / (1 + np.abs(F))))
    return res <= 1e-8, f"max reconstruction residual {res:.1e} (tol 1e-8)"


def dsB_equals_C():
    _, chart, _, split = fl.radial_setup(64)
    seed = fl.floer_seed(split, 1e-3)
    Z1 = fl.nonlinear_floer_solve(chart, split, seed, 1.0, 200)
    Z2 = fl.nonlinear_floer_solve(chart, split, seed, 1.0, 400)
    pts = Z1.s_grid[1:-1:20]
    r1 = fl.check_dsB_equals_C(chart, Z1, s_points=pts)
    r2 = fl.check_dsB_equals_C(chart, Z2, s_points=pts)
    ratio = r1.max_residual / r2.max_residual
    return 3.5 <= ratio <= 4.5, f"residual {r1.max_residual:.2e} -> {r2.max_residual:.2e}, ratio {ratio:.3f} (in [3.5, 4.5])"


def linear_decay():
    _, chart, _, split = fl.radial_setup(64)
    v = fl.smooth_eigenvector(split, -LAM1)
    s = np.linspace(0, 1, 201)
    Z = fl.linear_stable_evolution(split, lf.LoopGrid.from_flat(1e-3 * v, 64, 1), s)
    rep = fl.measure_decay(chart, Z, split)
    err = max(abs(f.rate - LAM1) for f in rep.fits.values())
    worst = 0.0
    for B in np.linspace(0.0, LAM1, 21):
        worst = max(worst, float(np.max(rep.l2_qnorm / (rep.l2_qnorm[0] * np.exp(-B * s)))))
    ok = err <= 1e-3 and worst <= 1 + 1e-9
    return ok, f"max |rate - |lambda1|| = {err:.1e} (tol 1e-3); worst |QZ(s)|/envelope {worst:.12f}"


def nonlinear_decay():
    _, chart, _, split = fl.radial_setup(64)
    Z = fl.nonlinear_floer_solve(chart, split, fl.floer_seed(split, 1e-3), 1.0, 200)
    rep = fl.measure_decay(chart, Z, split)
    rates = {k: f.rate for k, f in rep.fits.items()}
    ok = rep.bound_ok and all(r >= rep.rate_floor for r in rates.values()) and Z.residual <= fl.NEWTON_TOL
    rs = ", ".join(f"{k} {r:.3f}" for k, r in rates.items())
    return ok, f"rates {rs} vs floor {rep.rate_floor:.3f}; bound ratio {rep.bound_max_ratio:.6f}; residual {Z.residual:.1e}"


def maximum_principle():
    s = np.linspace(0, 5, 501)
    eq = fl.maximum_principle_check(np.exp(-2 * s), s, 2.0)
    strict = fl.maximum_principle_check(np.exp(-3 * s), s, 2.0)
    s20 = np.linspace(0, 20, 201)
    try:
        fl.maximum_principle_check(np.cosh(2 * (s20 - 10)), s20, 2.0)
        refused = False
    except fl.HypothesisError:
        refused = True
    ok = eq.passed and eq.equality and strict.passed and strict.conclusion_margin > 0 and refused
    return ok, (
        f"equality case margin {eq.conclusion_margin:.1e}; strict case margin {strict.conclusion_margin:.3f}; "
        f"cosh control rejected {refused}"
    )


def monodromy_and_action():
    good = fl.mb_condition_check(fl.radial_model())
    bad = fl.mb_condition_check(fl.radial_model(kind="linear"))
    r = np.linspace(0.2, 3.0, 40)
    prof = fl.reeb_action_profile(lambda x: math.pi * x**2, r)
    ok = good.passed and set(good.kernel_dims) == {1} and not bad.passed and prof.monotone_where_convex
    return ok, (
        f"radial 1-eigenspace dims {sorted(set(good.kernel_dims))}, linear control {sorted(set(bad.kernel_dims))} "
        f"(fails), action monotone {prof.monotone_where_convex}"
    )


def compactness_certificate():
    sc = mb.sphere_height()
    gap = fc.spectral_gap(sc.critical_values, sc.Z.zeta)
    members = [
        mb.with_limit(mb.integrate_gradient_flow(sc.M, sc.f, mb.meridian_point(th), 40.0), sc.Z)
        for th in np.linspace(0.3, 1.2, 10)
    ]
    cert = fc.compactness_certificate(fc.ModuliFamily(members, 1.9), sc.Z, gap=gap)
    try:
        fc.compactness_certificate(fc.ModuliFamily(members, gap), sc.Z, gap=gap)
        msg = ""
    except fc.CompactnessRefusal as exc:
        msg = str(exc)
    ok = cert.passed and math.isfinite(cert.s0) and "escape every compact set" in msg
    return ok, f"certificate {cert.passed} with s0(0.5) = {cert.s0:.3f}; refusal at E0 = {gap:g}: {bool(msg)}"


CRITERIA = [
    (1, "energy-action identity", energy_action_identity),
    (2, "spectral gap oracle", spectral_gap_oracle),
    (3, "Morse-Bott decay", morse_bott_decay),
    (4, "weighted Sobolev norms", weighted_norms),
    (5, "non-compactness witness", noncompactness_witness),
    (6, "operator facts", operator_facts),
    (7, "Hadamard factorization", hadamard_factorization),
    (8, "dsB = C identity", dsB_equals_C),
    (9, "linear decay", linear_decay),
    (10, "nonlinear decay", nonlinear_decay),
    (11, "maximum principle", maximum_principle),
    (12, "monodromy and action profile", monodromy_and_action),
    (13, "compactness certificate", compactness_certificate),
]


def evaluate(num, title, fn):
    t0 = time.perf_counter()
    ok, detail = fn()
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d} {title}: {detail} ({time.perf_counter() - t0:.1f}s)"
    return ok, line


@pytest.mark.parametrize("num,title,fn", CRITERIA, ids=[f"{n:02d}-{t.replace(' ', '-')}" for n, t, _ in CRITERIA])
def test_criterion(num, title, fn, capsys):
    ok, line = evaluate(num, title, fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [evaluate(*c) for c in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
