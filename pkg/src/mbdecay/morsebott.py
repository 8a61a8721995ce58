"""Finite-dimensional gradient flows near Morse-Bott critical sets.

Integration, limit detection, exponential decay fits, the Morse-Bott
kernel test, weighted Sobolev norms and the shift (non-compactness) family.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import DivergenceError, FitError, IntegrationError, PreconditionError
from .flowcore import CriticalSetSample, Trajectory, build_trajectory
from .geometry import (
    CHORDAL,
    ScalarField,
    euclidean,
    kernel_dimension,
    riemannian_gradient,
    sphere,
    tangent_hessian,
)

NOISE_FLOOR = 1e-10


@dataclass
class FlowControls:
    atol: float = 1e-10
    rtol: float = 1e-8
    stop_tol: float = 1e-10
    h0: float = 1e-3
    h_max: float = 2e-2
    h_min: float = 1e-12
    drift_tol: float = 1e-8
    max_steps: int = 200_000
    sign: float = 1.0


def _rk4(rhs, y, h):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_gradient_flow(M, f, x0, s_max, controls=None):
    """Adaptive RK4 for gamma' = grad f with re-projection after every step.

    Step control compares one full step with two half steps.  Integration
    stops at s_max or once |grad f| < stop_tol.  ``controls.sign = -1``
    integrates the negative gradient (used for backward halves of
    heteroclinics).
    """
    c = controls or FlowControls()
    y = np.asarray(x0, dtype=float).copy()
    M.check_point(y)

    def rhs(p):
        return c.sign * (M.tangent_projector(p) @ f.ambient_gradient(p))

    s_list, y_list = [0.0], [y.copy()]
    s = 0.0
    h = c.h0
    for _ in range(c.max_steps):
        g = rhs(y)
        if np.linalg.norm(g) < c.stop_tol or s >= s_max:
            break
        h = min(h, c.h_max, s_max - s)
        while True:
            if h < c.h_min:
                raise DivergenceError(f"step size underflow at s={s:.6g}")
            full = _rk4(rhs, y, h)
            half = _rk4(rhs, _rk4(rhs, y, 0.5 * h), 0.5 * h)
            if not np.all(np.isfinite(half)):
                h *= 0.25
                continue
            err = np.linalg.norm(half - full) / 15.0
            tol = c.atol + c.rtol * np.linalg.norm(half)
            if err <= tol:
                break
            h *= max(0.2, 0.9 * (tol / err) ** 0.2)
        y = M.newton_step(half)
        drift = M.residual(y)
        if drift > c.drift_tol:
            raise IntegrationError(f"constraint drift {drift:.3e} at s={s:.6g}")
        s += h
        s_list.append(s)
        y_list.append(y.copy())
        if not np.all(np.isfinite(y)):
            raise DivergenceError("non-finite state")
        h *= 4.0 if err == 0 else min(4.0, max(1.0, 0.9 * (tol / err) ** 0.2))
    if c.sign < 0:
        traj = build_trajectory(M, _negated(f), s_list, y_list)
        return traj
    return build_trajectory(M, f, s_list, y_list)


def _negated(f):
    grad = None if f.gradient is None else (lambda p: -np.asarray(f.gradient(p)))
    return ScalarField(lambda p: -f.value(p), grad, name=f"-{f.name}")


def detect_limit(traj, Z, grad_tol=1e-8, tail_frac=0.1, limit_tol=1e-6, z_tol=1e-4):
    """Limit point when the tail is Cauchy, critical and near Z; otherwise None.

    With a nearest-point hint on Z the last point is projected onto Z, which
    removes the O(stop_tol) offset of the last node from the true limit.
    """
    if math.sqrt(max(traj.G_values[-1], 0.0)) > grad_tol:
        return None
    k = max(1, int(math.ceil(tail_frac * len(traj))))
    tail = traj.points[-k:]
    if len(tail) > 1:
        diam = max(np.max(np.linalg.norm(tail - p[None], axis=1)) for p in tail)
        if diam > limit_tol:
            return None
    last = traj.points[-1]
    if Z.distance(last) > z_tol:
        return None
    if Z.nearest is not None:
        return np.asarray(Z.nearest(last), dtype=float)
    return last.copy()


def with_limit(traj, Z, **kw):
    """Trajectory with ``limit`` filled by detect_limit."""
    lim = detect_limit(traj, Z, **kw)
    traj.limit = lim
    traj.limit_quality = None if lim is None else "cauchy-tail"
    return traj


@dataclass
class DecayFit:
    A_hat: float
    B_hat: float
    r_squared: float
    window: tuple
    noise_floor: float
    n_samples: int


def _window(traj, dist, noise_floor, skip_frac):
    n = len(traj)
    start = int(math.floor(skip_frac * n))
    idx = np.arange(start, n)
    idx = idx[dist[idx] > noise_floor]
    return idx


def _loglinear(s, y):
    logy = np.log(y)
    slope, icpt = np.polyfit(s, logy, 1)
    resid = logy - (slope * s + icpt)
    ss = np.sum((logy - logy.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return slope, icpt, r2


def fit_exponential_decay(traj, limit, metric=CHORDAL, zeta=None, f=None, noise_floor=NOISE_FLOOR, skip_frac=0.1):
    """Log-linear fit of d(gamma(s), limit) after dropping the transient."""
    dist = np.array([metric(p, limit) for p in traj.points])
    idx = _window(traj, dist, noise_floor, skip_frac)
    if idx.size < 10:
        raise FitError(f"only {idx.size} samples above the noise floor")
    s = traj.s_grid[idx]
    slope, _, r2 = _loglinear(s, dist[idx])
    B = max(-slope, 0.0)
    if zeta is None:
        zeta = float(f(limit)) if f is not None else float(traj.f_values[-1])
    head = zeta - traj.f_values[idx[0]]
    if head <= 0:
        A = math.inf
    else:
        A = float(np.max(dist[idx] * np.exp(B * (s - s[0]))) / math.sqrt(head))
    return DecayFit(A, B, float(r2), (float(s[0]), float(s[-1])), noise_floor, int(idx.size))


@dataclass
class DecayBoundReport:
    passed: bool
    violations: list
    derivative_rate: float
    rate_agreement: float
    max_ratio: float


def speed_profile(traj):
    """|gamma'(s)| by second-order finite differences on the grid."""
    if len(traj) < 3:
        return np.zeros(len(traj))
    d = np.gradient(traj.points, traj.s_grid, axis=0, edge_order=2)
    return np.linalg.norm(d, axis=1)


def check_decay_bound(traj, fit, zeta, limit=None, metric=CHORDAL, rel_tol=1e-9, rate_tol=0.1):
    """Pointwise decay bound on the fit window plus the derivative decay rate."""
    limit = traj.limit if limit is None else limit
    dist = np.array([metric(p, limit) for p in traj.points])
    if np.all(dist <= fit.noise_floor):
        return DecayBoundReport(True, [], 0.0, 0.0, 0.0)
    s_lo, s_hi = fit.window
    sel = np.nonzero((traj.s_grid >= s_lo) & (traj.s_grid <= s_hi))[0]
    head = zeta - traj.f_values[sel[0]]
    env = fit.A_hat * math.sqrt(max(head, 0.0)) * np.exp(-fit.B_hat * (traj.s_grid[sel] - s_lo))
    ratio = dist[sel] / np.maximum(env, 1e-300)
    violations = [(float(traj.s_grid[i]), float(dist[i]), float(e)) for i, e in zip(sel, env) if dist[i] > e * (1 + rel_tol)]
    speed = speed_profile(traj)
    keep = sel[speed[sel] > fit.noise_floor]
    if keep.size < 10:
        raise FitError("too few samples for the derivative decay fit")
    slope, _, _ = _loglinear(traj.s_grid[keep], speed[keep])
    rate = -slope
    agree = abs(rate - fit.B_hat) / fit.B_hat if fit.B_hat > 0 else math.inf
    passed = not violations and agree <= rate_tol
    return DecayBoundReport(passed, violations, float(rate), float(agree), float(ratio.max()))


@dataclass
class MorseBottReport:
    passed: bool
    kernel_dims: list
    expected_dim: int
    hessians: list = field(default_factory=list)


def morse_bott_verify(M, f, Z, basis_fn=None):
    """Kernel of the tangent Hessian at each Z sample must equal dim Z."""
    if Z.dim is None:
        raise PreconditionError("dimension hint of Z is missing")
    dims, hess = [], []
    for p in Z.points:
        basis = None if basis_fn is None else basis_fn(p)
        H = tangent_hessian(M, f, p, basis=basis)
        hess.append(H)
        dims.append(kernel_dimension(H))
    return MorseBottReport(all(k == Z.dim for k in dims), dims, Z.dim, hess)


@dataclass
class WeightedNormSpec:
    delta: float
    k: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.k not in (0, 1, 2):
            raise ValueError("k must be 0, 1 or 2")


def weighted_sobolev_norm(values, s_grid, spec, growth_tol=0.1):
    """Weighted H^k norm on a uniform truncated grid; inf if the tail keeps growing.

    Uses sum_i int e^{2 delta |s|} |d^i u|^2 ds with trapezoid quadrature.
    """
    u = np.asarray(values, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    s = np.asarray(s_grid, dtype=float)
    ds = np.diff(s)
    if not np.allclose(ds, ds[0], rtol=1e-9, atol=0):
        raise PreconditionError("weighted_sobolev_norm needs a uniform grid")
    w = np.exp(2.0 * spec.delta * np.abs(s))
    dens = np.zeros_like(s)
    der = u
    for i in range(spec.k + 1):
        if i > 0:
            der = np.gradient(der, s, axis=0, edge_order=2)
        dens = dens + w * np.sum(der * der, axis=1)
    cum = _kernels.cumulative_trapezoid(dens, s)
    total = cum[-1]
    if total == 0:
        return 0.0
    q = cum[int(0.75 * (s.size - 1))]
    if not np.isfinite(total) or q <= 0 or (total - q) > growth_tol * q:
        return math.inf
    return float(math.sqrt(total))


# ------------------------------------------------------------------ scenarios


def height_function():
    """f(p) = p_z on R^3."""
    return ScalarField(lambda p: p[2], lambda p: np.array([0.0, 0.0, 1.0]), name="height")


def circle_field():
    """f = -((sqrt(x^2+y^2) - 1)^2 + z^2), maximal on the unit circle."""

    def value(p):
        r = math.hypot(p[0], p[1])
        return -((r - 1.0) ** 2 + p[2] ** 2)

    def grad(p):
        r = math.hypot(p[0], p[1])
        g = -2.0 * (r - 1.0) / r
        return np.array([g * p[0], g * p[1], -2.0 * p[2]])

    return ScalarField(value, grad, name="circle")


@dataclass
class Scenario:
    name: str
    M: object
    f: ScalarField
    Z: CriticalSetSample
    critical_values: list


def sphere_height():
    M = sphere(3)
    north = np.array([0.0, 0.0, 1.0])
    Z = CriticalSetSample(north[None], 1.0, dim=0, nearest=lambda p: north)
    return Scenario("sphere-height", M, height_function(), Z, [-1.0])


def circle_morse_bott(n_samples=16):
    ang = 2 * np.pi * np.arange(n_samples) / n_samples
    pts = np.stack([np.cos(ang), np.sin(ang), np.zeros_like(ang)], axis=1)

    def nearest(p):
        r = math.hypot(p[0], p[1])
        return np.array([p[0] / r, p[1] / r, 0.0])

    Z = CriticalSetSample(pts, 0.0, dim=1, nearest=nearest)
    return Scenario("circle-morse-bott", euclidean(3), circle_field(), Z, [])


def meridian_point(theta):
    """Point on the xz-meridian at polar angle theta from the north pole."""
    return np.array([math.sin(theta), 0.0, math.cos(theta)])


def glue_heteroclinic(backward, forward):
    """Two one-sided trajectories sharing gamma(0) as one trajectory on R.

    ``backward`` is the negative-gradient flow from the common point; its
    limit becomes the limit at -infinity.
    """
    if not np.allclose(backward.points[0], forward.points[0], atol=1e-12):
        raise PreconditionError("halves do not share their initial point")
    s = np.concatenate([-backward.s_grid[:0:-1], forward.s_grid])
    pts = np.concatenate([backward.points[:0:-1], forward.points])
    fv = np.concatenate([-backward.f_values[:0:-1], forward.f_values])
    gv = np.concatenate([backward.G_values[:0:-1], forward.G_values])
    return Trajectory(s, pts, fv, gv, limit=forward.limit, start_limit=backward.limit,
                      limit_quality=forward.limit_quality)


def sphere_heteroclinic(controls=None, s_max=60.0):
    """Meridian flow line of the height function from the south to the north pole."""
    sc = sphere_height()
    start = meridian_point(math.pi / 2)
    c = controls or FlowControls()
    fwd = integrate_gradient_flow(sc.M, sc.f, start, s_max, c)
    back_c = replace(c, sign=-1.0)
    bwd = integrate_gradient_flow(sc.M, sc.f, start, s_max, back_c)
    south = np.array([0.0, 0.0, -1.0])
    zs = CriticalSetSample(south[None], -1.0, dim=0, nearest=lambda p: south)
    with_limit(fwd, sc.Z)
    with_limit(bwd, zs)
    return glue_heteroclinic(bwd, fwd)


@dataclass
class ShiftReport:
    shifts: list
    window_distances: list
    full_distances: list
    baseline_window: float
    baseline_full: float
    half_diameter: float
    window_monotone: bool
    full_bounded_below: bool
    degenerate: bool

    @property
    def passed(self):
        return self.window_monotone and self.full_bounded_below and not self.degenerate


def shift_family_diagnostic(traj, shifts, window=(-2.0, 2.0), n_window=401, metric=CHORDAL):
    """Shifted copies gamma(. - s_n): local convergence to gamma(-inf), no uniform convergence."""
    if traj.limit is None or traj.start_limit is None:
        raise PreconditionError("heteroclinic needs both limits")
    lo, hi = traj.start_limit, traj.limit
    wgrid = np.linspace(window[0], window[1], n_window)

    def dists(shift):
        win = traj.sample(wgrid - shift)
        wd = max(metric(p, lo) for p in win)
        full_grid = np.concatenate([traj.s_grid + shift, wgrid])
        full = traj.sample(full_grid - shift)
        fd = max(max(metric(p, lo) for p in full), metric(hi, lo))
        return wd, fd

    base_w, base_f = dists(0.0)
    wds, fds = [], []
    for sh in shifts:
        w, f_ = dists(sh)
        wds.append(w)
        fds.append(f_)
    half = 0.5 * metric(lo, hi)
    degenerate = half == 0.0
    order = np.argsort(shifts)
    wsorted = np.asarray(wds)[order]
    monotone = bool(np.all(np.diff(wsorted) < 0)) if len(wds) > 1 else True
    bounded = all(f_ >= half for f_ in fds) and not degenerate
    return ShiftReport(list(shifts), wds, fds, base_w, base_f, half, monotone, bounded, degenerate)
