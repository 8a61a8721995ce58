"""Floer cylinders near a Morse-Bott circle of 1-periodic orbits.

The default model is W = R^2 with H = h(rho), rho = (x^2 + y^2)/2 and
h(rho) = pi rho^2; its 1-periodic orbits at rho = 1 form the circle N.
Loops are written in log-polar tubular coordinates (theta, z'') with
theta = angle / 2pi and z'' = log(r / sqrt 2) / 2pi, so N = {z'' = 0}.
"""
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from . import _kernels
from .errors import DomainError, FitError, HypothesisError, PreconditionError, SolverError
from .loopfield import (
    LoopGrid,
    LoopOperator,
    build_operator_A,
    check_in_chart,
    diff_matrix,
    embed_zpp,
    flat,
    hadamard_factor,
    shift_values,
    sobolev_gram,
    spectral_split,
)
from .morsebott import _loglinear

CHART_RADIUS = 0.3
NEWTON_RADIUS = 0.05
NEWTON_TOL = 1e-9
NOISE_FLOOR = 1e-10
JET_STEPS = (1e-5, 1e-4, 1e-3)
OMEGA2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
JSTD2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def _blockdiag(block, n):
    return np.kron(np.eye(n), block)


def rk4_flow(rhs, p, T=1.0, steps=2000):
    """Classical RK4 for the autonomous field ``rhs``, vectorized over leading axes."""
    y = np.array(p, dtype=float)
    h = T / steps
    for _ in range(steps):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


# --------------------------------------------------------------- model


@dataclass
class HamiltonianModel:
    """H = sum_i h(rho_i) on R^{2n} with coordinates (x1, y1, ..., xn, yn).

    omega = sum dx_i ^ dy_i, so omega(., X_H) = dH gives
    X_H = h'(rho_i) (-y_i, x_i) on each factor.
    """

    h: Callable
    dh: Callable
    d2h: Callable
    n: int = 1
    j_twist: float = 0.0
    name: str = "radial"

    @property
    def dim(self):
        return 2 * self.n

    @property
    def d(self):
        return self.n

    @property
    def omega(self):
        return _blockdiag(OMEGA2, self.n)

    def _pairs(self, p):
        p = np.asarray(p, dtype=float)
        return p.reshape(p.shape[:-1] + (self.n, 2))

    def rho(self, p):
        q = self._pairs(p)
        return 0.5 * np.sum(q * q, axis=-1)

    def H(self, p):
        return np.sum(self.h(self.rho(p)), axis=-1)

    def grad_H(self, p):
        q = self._pairs(p)
        return (self.dh(self.rho(p))[..., None] * q).reshape(np.shape(p))

    def X_H(self, p):
        q = self._pairs(p)
        rot = np.stack([-q[..., 1], q[..., 0]], axis=-1)
        return (self.dh(self.rho(p))[..., None] * rot).reshape(np.shape(p))

    def J(self, t, p):
        """Almost complex structure J_t(p), shape (..., 2n, 2n)."""
        p = np.asarray(p, dtype=float)
        base = np.broadcast_to(_blockdiag(JSTD2, self.n), p.shape[:-1] + (self.dim, self.dim)).copy()
        if self.j_twist == 0.0:
            return base
        if self.n != 1:
            raise DomainError("twisted J is only defined for n = 1")
        q = logpolar_backward(p)
        Phi = logpolar_jacobian(q)
        return Phi @ twisted_J(q[..., 1], self.j_twist) @ np.linalg.inv(Phi)

    def flow(self, p, T=1.0, steps=2000):
        return rk4_flow(self.X_H, p, T, steps)

    def N_sample(self, k=8, rng=None):
        """Points of N = {rho_i = 1 for all i}."""
        if rng is None:
            ang = (np.arange(k)[:, None] / k + np.arange(self.n)[None, :] * 0.137) * 2 * math.pi
        else:
            ang = rng.uniform(0, 2 * math.pi, size=(k, self.n))
        r = math.sqrt(2.0)
        return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=-1).reshape(k, self.dim)

    def check_invariants(self, rng, n_probe=50, t=0.0):
        """Max residuals of dH(v) = omega(v, X_H), J^2 = -I and asymmetry of omega(., J.), plus min eig."""
        p = rng.uniform(-1.5, 1.5, size=(n_probe, self.dim))
        v = rng.standard_normal((n_probe, self.dim))
        lhs = np.einsum("ki,ki->k", self.grad_H(p), v)
        rhs = np.einsum("ki,ij,kj->k", v, self.omega, self.X_H(p))
        J = self.J(t, p)
        g = np.einsum("ij,kjl->kil", self.omega, J)
        return {
            "dH_omega": float(np.max(np.abs(lhs - rhs))),
            "J_squared": float(np.max(np.abs(J @ J + np.eye(self.dim)))),
            "g_asym": float(np.max(np.abs(g - np.transpose(g, (0, 2, 1))))),
            "g_min_eig": float(np.min(np.linalg.eigvalsh(0.5 * (g + np.transpose(g, (0, 2, 1)))))),
        }


def radial_model(n=1, kind="quadratic", j_twist=0.0):
    """h(rho) = pi rho^2 (quadratic) or h(rho) = 2 pi rho (linear control)."""
    if kind == "quadratic":
        return HamiltonianModel(
            lambda r: math.pi * np.asarray(r) ** 2,
            lambda r: 2 * math.pi * np.asarray(r),
            lambda r: 2 * math.pi + 0 * np.asarray(r),
            n,
            j_twist,
            "radial-quadratic",
        )
    if kind == "linear":
        return HamiltonianModel(
            lambda r: 2 * math.pi * np.asarray(r),
            lambda r: 2 * math.pi + 0 * np.asarray(r),
            lambda r: 0 * np.asarray(r),
            n,
            j_twist,
            "radial-linear",
        )
    raise ValueError(f"unknown model kind {kind!r}")


# --------------------------------------------------------------- chart


def logpolar_forward(q):
    q = np.asarray(q, dtype=float)
    r = math.sqrt(2.0) * np.exp(2 * math.pi * q[..., 1])
    a = 2 * math.pi * q[..., 0]
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=-1)


def logpolar_backward(p):
    p = np.asarray(p, dtype=float)
    r = np.hypot(p[..., 0], p[..., 1])
    if np.any(r == 0):
        raise DomainError("origin is outside the tubular chart")
    th = np.mod(np.arctan2(p[..., 1], p[..., 0]) / (2 * math.pi), 1.0)
    return np.stack([th, np.log(r / math.sqrt(2.0)) / (2 * math.pi)], axis=-1)


def logpolar_jacobian(q):
    """d(forward)/d(theta, z''), shape (..., 2, 2)."""
    q = np.asarray(q, dtype=float)
    r = math.sqrt(2.0) * np.exp(2 * math.pi * q[..., 1])
    a = 2 * math.pi * q[..., 0]
    c, s = np.cos(a), np.sin(a)
    k = 2 * math.pi * r
    return np.stack([np.stack([-k * s, k * c], -1), np.stack([k * c, k * s], -1)], -2)


def twisted_J(z, eps):
    """Phi(z) J0 Phi(z)^-1 with Phi = [[1, eps z], [0, 1]] and J0 = [[0, 1], [-1, 0]]."""
    z = np.asarray(z, dtype=float)
    e = eps * z
    out = np.empty(z.shape + (2, 2))
    out[..., 0, 0] = -e
    out[..., 0, 1] = 1.0 + e * e
    out[..., 1, 0] = -1.0
    out[..., 1, 1] = e
    return out


@dataclass
class TubularChart:
    """Log-polar tubular coordinates (theta, z'') around N = {rho = 1} for n = 1."""

    model: HamiltonianModel
    chart_radius: float = CHART_RADIUS

    def __post_init__(self):
        if self.model.n != 1:
            raise DomainError("tubular chart is implemented for n = 1")
        probe = np.stack([np.linspace(0, 1, 17), np.zeros(17)], -1)
        r = float(np.max(np.abs(self.F(probe))))
        if r > 1e-8:
            raise PreconditionError(f"d/dtheta differs from X_H on N (residual {r:.2e}); model fails the chart")

    @property
    def d(self):
        return self.model.d

    @property
    def dim(self):
        return self.model.dim

    def forward(self, q):
        return logpolar_forward(q)

    def backward(self, p):
        return logpolar_backward(p)

    def jacobian(self, q):
        return logpolar_jacobian(q)

    def X_coord(self, q):
        """X_H pushed into chart coordinates."""
        q = np.asarray(q, dtype=float)
        X = self.model.X_H(self.forward(q))
        return np.linalg.solve(self.jacobian(q), X[..., None])[..., 0]

    def F(self, q):
        """d/dtheta - X_H in chart coordinates; vanishes on {z'' = 0}."""
        q = np.asarray(q, dtype=float)
        out = -self.X_coord(q)
        out[..., 0] += 1.0
        return out

    def F_jac(self, q):
        # radial model: X_coord = (h'(rho)/2pi, 0) with rho = exp(4 pi z'')
        q = np.asarray(q, dtype=float)
        rho = np.exp(4 * math.pi * q[..., 1])
        out = np.zeros(q.shape + (2,))
        out[..., 0, 1] = -self.model.d2h(rho) * 4 * math.pi * rho / (2 * math.pi)
        return out

    def J_field(self, t, q):
        q = np.asarray(q, dtype=float)
        if self.model.j_twist == 0.0:
            return np.broadcast_to(OMEGA2, q.shape[:-1] + (2, 2)).copy()
        return twisted_J(q[..., 1], self.model.j_twist)

    def J_pushforward(self, t, q):
        """Ambient J_t conjugated into chart coordinates (independent of J_field)."""
        Phi = self.jacobian(q)
        return np.linalg.solve(Phi, self.model.J(t, self.forward(q)) @ Phi)

    def S_field(self, q):
        """Hadamard factor S with F = S z'', shape (..., 2, 1)."""
        return hadamard_factor(self.F, q, self.d, jac=self.F_jac, check=False)

    def S_full(self, q):
        return embed_zpp(self.S_field(q), self.dim, self.d)

    def omega_coord(self, q):
        Phi = self.jacobian(q)
        return np.swapaxes(Phi, -1, -2) @ self.model.omega @ Phi

    def metric(self, t, q):
        g = self.omega_coord(q) @ self.J_field(t, q)
        return 0.5 * (g + np.swapaxes(g, -1, -2))

    def x0(self, N):
        """Chart image of the orbit x0(t): (t, 0)."""
        return np.stack([np.arange(N) / N, np.zeros(N)], -1)

    def metric0(self, N):
        return self.metric(np.arange(N) / N, self.x0(N))

    def J0(self, N):
        return self.J_field(np.arange(N) / N, self.x0(N))

    def S0(self, N):
        return self.S_field(self.x0(N))

    def round_trip(self, q):
        return self.backward(self.forward(q))


def shift_loops(x, sign):
    """Sigma^+ (sign > 0) or Sigma^- (sign < 0) on the theta coordinate."""
    return LoopGrid(shift_values(x.values, sign), x.d)


def constant_loop(N, theta=0.0, d=1):
    return LoopGrid(np.tile([theta, 0.0], (N, 1)), d)


# --------------------------------------------------------------- (MB) check


@dataclass
class MBReport:
    passed: bool
    d: int
    kernel_dims: list
    period_residual: float
    tangent_residual: float
    singular_values: list


def mb_condition_check(model, n_samples=8, steps=2000, fd_step=1e-6, tol=1e-4, period_tol=1e-6):
    """Compare ker(d phi^1 - I) with T N at sampled points of N.

    The monodromy is a shear for radial models, so the 1-eigenspace is read
    off as the null space of (d phi^1 - I) via its singular values.
    """
    P = model.N_sample(n_samples)
    m = model.dim
    probes = [P]
    for i in range(m):
        e = np.zeros(m)
        e[i] = fd_step
        probes += [P + e, P - e]
    out = model.flow(np.concatenate(probes), 1.0, steps)
    img = out[:n_samples]
    per = float(np.max(np.abs(img - P)))
    if per > period_tol:
        raise PreconditionError(f"sample orbits are not 1-periodic (residual {per:.2e})")
    dims, svals = [], []
    tan_res = 0.0
    for k in range(n_samples):
        cols = []
        for i in range(m):
            fp = out[n_samples * (1 + 2 * i) + k]
            fm = out[n_samples * (2 + 2 * i) + k]
            cols.append((fp - fm) / (2 * fd_step))
        mono = np.stack(cols, axis=1)
        sv = np.linalg.svd(mono - np.eye(m), compute_uv=False)
        dims.append(int(np.sum(sv < tol)))
        svals.append(sv.tolist())
        # T_p N is spanned by the rotation fields of each factor
        q = P[k].reshape(model.n, 2)
        for j in range(model.n):
            v = np.zeros((model.n, 2))
            v[j] = [-q[j, 1], q[j, 0]]
            tan_res = max(tan_res, float(np.linalg.norm((mono - np.eye(m)) @ v.reshape(-1))))
    passed = all(k == model.d for k in dims) and tan_res < tol
    return MBReport(passed, model.d, dims, per, tan_res, svals)


# --------------------------------------------------------------- actions


def orbit_action(model, p, steps=2000):
    """Action int x^* lambda - int H dt along the 1-periodic orbit through p, lambda = (x dy - y dx)/2."""
    y = np.array(p, dtype=float)
    h = 1.0 / steps
    lam = 0.0
    H = 0.0
    for _ in range(steps):
        X = model.X_H(y)
        q = y.reshape(-1, 2)
        v = X.reshape(-1, 2)
        lam += 0.5 * float(np.sum(q[:, 0] * v[:, 1] - q[:, 1] * v[:, 0])) * h
        H += float(model.H(y)) * h
        y = rk4_flow(model.X_H, y, h, 1)
    return lam - H


def radial_orbit_actions(model, kmax=3, steps=2000):
    """Actions of the 1-periodic orbits of an n=1 radial model with winding k = 0..kmax.

    Radii solve h'(rho) = 2 pi k; each action is integrated along the orbit.
    """
    acts = [float(-model.h(0.0))]
    for k in range(1, kmax + 1):
        rho = brentq(lambda r: float(model.dh(r)) - 2 * math.pi * k, 1e-9, 1e6)
        p = np.array([math.sqrt(2 * rho), 0.0])
        acts.append(orbit_action(model, p, steps * k))
    return np.array(acts)


@dataclass
class ReebProfile:
    r: np.ndarray
    action: np.ndarray
    slope: np.ndarray
    monotone_where_convex: bool


def reeb_action_profile(h, r_grid, dh=None, d2h=None, fd_step=1e-5):
    """Table of (r, r h'(r) - h(r), r h''(r)); monotonicity is checked where h'' > 0."""
    r = np.asarray(r_grid, dtype=float)

    def deriv(fun, x):
        s = fd_step * (1 + np.abs(x))
        return (fun(x + s) - fun(x - s)) / (2 * s)

    dh = dh or (lambda x: deriv(h, x))
    d2h = d2h or (lambda x: deriv(dh, x))
    act = r * dh(r) - h(r)
    slope = r * d2h(r)
    convex = d2h(r) > 0
    ok = True
    for i in range(len(r) - 1):
        if convex[i] and convex[i + 1] and not act[i + 1] > act[i]:
            ok = False
    return ReebProfile(r, act, slope, ok)


# --------------------------------------------------------------- jets


def pointwise_jet(fun, p, order, h):
    """k-th derivative tensor of a pointwise map (K, m) -> (K, a, b).

    Nested central differences with per-point step h (K,), Richardson
    extrapolated from h and h/2.  Derivative indices are appended last.
    """
    p = np.asarray(p, dtype=float)
    K, m = p.shape
    h = np.broadcast_to(np.asarray(h, dtype=float), (K,))

    def nested(step):
        base = fun(p)
        out = np.zeros(base.shape + (m,) * order)
        for idx in np.ndindex(*((m,) * order)):
            acc = np.zeros_like(base)
            for signs in np.ndindex(*((2,) * order)):
                sg = 1.0 - 2.0 * np.array(signs)
                shift = np.zeros((K, m))
                for j, i in enumerate(idx):
                    shift[:, i] += sg[j] * step
                acc += np.prod(sg) * fun(p + shift)
            out[(Ellipsis,) + idx] = acc / (2.0 * step[:, None, None]) ** order
        return out

    return (4.0 * nested(0.5 * h) - nested(h)) / 3.0


def _contract(T, Vs):
    for V in Vs:
        T = np.einsum("k...i,ki->k...", T, V)
    return T


class Jets:
    """Pointwise jets of J_t and the embedded S along a shifted loop."""

    def __init__(self, chart, t, p, order, step_scale=1.0):
        p = np.asarray(p, dtype=float)
        t = np.asarray(t, dtype=float)
        self.J = [chart.J_field(t, p)]
        self.S = [chart.S_full(p)]
        size = 1.0 + np.linalg.norm(p, axis=-1)
        for k in range(1, order + 1):
            h = JET_STEPS[k - 1] * step_scale * size
            self.J.append(pointwise_jet(lambda q: chart.J_field(t, q), p, k, h))
            self.S.append(pointwise_jet(chart.S_full, p, k, h))

    def dA(self, Vs):
        """(R, T) with D^k A[V1..Vk] X = R dX/dt + T X (product rule over A = -J (d/dt + S))."""
        k = len(Vs)
        R = np.zeros_like(self.J[0])
        T = np.zeros_like(self.J[0])
        for mask in range(2**k):
            U = [Vs[i] for i in range(k) if mask >> i & 1]
            C = [Vs[i] for i in range(k) if not mask >> i & 1]
            Jp = _contract(self.J[len(U)], U)
            if not C:
                R -= Jp
                T -= Jp @ self.S[0]
            else:
                T -= Jp @ _contract(self.S[len(C)], C)
        return R, T


def rt_apply(RT, X, dmat):
    R, T = RT
    return np.einsum("tij,tj->ti", R, dmat @ X) + np.einsum("tij,tj->ti", T, X)


def rt_matrix(RT, dmat):
    R, T = RT
    return _kernels.pointwise_times_diff(R, dmat) + _kernels.pointwise_to_dense(T)


def rt_add(*terms):
    R = sum(c * rt[0] for c, rt in terms)
    T = sum(c * rt[1] for c, rt in terms)
    return R, T


class LoopJets:
    """Jets of x -> A_x at one loop, with the derived loops a = A_x x, a' and a''."""

    def __init__(self, chart, x, order, scheme="spectral", step_scale=1.0, dmat=None):
        check_in_chart(x, chart.chart_radius)
        self.x = x
        self.N = x.n_points
        self.dmat = diff_matrix(self.N, scheme) if dmat is None else dmat
        p = shift_values(x.values, +1)
        self.jets = Jets(chart, x.t, p, order, step_scale)
        self.A = self.jets.dA([])
        X = x.values
        self.a = rt_apply(self.A, X, self.dmat)
        if order >= 1:
            self.dA_a = self.jets.dA([self.a])
            self.a1 = rt_apply(self.dA_a, X, self.dmat) + rt_apply(self.A, self.a, self.dmat)

    def op(self, RT, label):
        return LoopOperator(rt_matrix(RT, self.dmat), label, self.N)

    def B_rt(self):
        return rt_add((1.0, self.jets.dA([self.a, self.a])), (1.0, self.jets.dA([self.a1])))

    def C_rt(self):
        a, a1, X, D = self.a, self.a1, self.x.values, self.dmat
        d2 = self.jets.dA([a, a])
        a2 = (
            rt_apply(d2, X, D)
            + rt_apply(self.jets.dA([a1]), X, D)
            + 2.0 * rt_apply(self.dA_a, a, D)
            + rt_apply(self.A, a1, D)
        )
        return rt_add((1.0, self.jets.dA([a, a, a])), (3.0, self.jets.dA([a, a1])), (1.0, self.jets.dA([a2])))


def operator_A(chart, x, scheme="spectral"):
    lj = LoopJets(chart, x, 0, scheme)
    return lj.op(lj.A, "A_x")


def directional_dA(chart, x, V, scheme="spectral", step_scale=1.0):
    """D_x A[V] from pointwise jets."""
    lj = LoopJets(chart, x, 1, scheme, step_scale)
    return lj.op(lj.jets.dA([V.values]), "D_xA[V]")


def directional_dA_fd(chart, x, V, h, scheme="spectral"):
    """(A_{x+hV} - A_{x-hV}) / 2h in loop space."""
    xp = LoopGrid(x.values + h * V.values, x.d)
    xm = LoopGrid(x.values - h * V.values, x.d)
    return LoopOperator(
        (operator_A(chart, xp, scheme).matrix - operator_A(chart, xm, scheme).matrix) / (2 * h), "fd", x.n_points
    )


def build_B(chart, x, scheme="spectral", step_scale=1.0):
    """B_x = D^2A[a, a] + DA[DA[a] x] + DA[A^2 x] with a = A_x x."""
    lj = LoopJets(chart, x, 2, scheme, step_scale)
    return lj.op(lj.B_rt(), "B_x")


def build_C(chart, x, scheme="spectral", step_scale=1.0):
    """C_x, the s-derivative of B along a Floer cylinder, expanded in its nine summands.

    Writing a' = DA[a]x + A^2 x and a'' = D^2A[a,a]x + DA[a']x + 2DA[a]a + A a',
    C_x = D^3A[a,a,a] + 3 D^2A[a,a'] + DA[a''].
    """
    lj = LoopJets(chart, x, 3, scheme, step_scale)
    return lj.op(lj.C_rt(), "C_x")


@dataclass
class AhatBundle:
    Ahat: LoopOperator
    Phat: np.ndarray
    Qhat: np.ndarray
    blocks: dict


def build_Ahat(chart, x, split, scheme="spectral"):
    """Lower-triangular block operator on triples (Z, dZ/ds, d^2Z/ds^2)."""
    lj = LoopJets(chart, x, 2, scheme)
    A = rt_matrix(lj.A, lj.dmat)
    dAa = rt_matrix(lj.dA_a, lj.dmat)
    B = rt_matrix(lj.B_rt(), lj.dmat)
    Z = np.zeros_like(A)
    Ahat = np.block([[A, Z, Z], [dAa, A, Z], [B, 2.0 * dAa, A]])
    Phat = sla.block_diag(split.P, split.P, split.P)
    Qhat = sla.block_diag(split.Q, split.Q, split.Q)
    return AhatBundle(LoopOperator(Ahat, "Ahat_x", x.n_points), Phat, Qhat, {"A": A, "dA[a]": dAa, "B": B})


def build_E(chart, x, scheme="spectral"):
    """E(x) = (x, A_x x, DA[A_x x] x + A_x^2 x)."""
    lj = LoopJets(chart, x, 1, scheme)
    return x, LoopGrid(lj.a, x.d), LoopGrid(lj.a1, x.d)


def build_D_C1_C2(chart, x, split):
    """D_x = I - C2_x, C1_x = P(J0 (S0 - S) z''), C2_x = P((J0 - J) J)."""
    check_in_chart(x, chart.chart_radius)
    N = x.n_points
    p = shift_values(x.values, +1)
    Jx = chart.J_field(x.t, p)
    J0 = chart.J0(N)
    Sx = chart.S_full(p)
    S0 = chart.S_full(chart.x0(N))
    C1 = split.P @ _kernels.pointwise_to_dense(J0 @ (S0 - Sx))
    C2 = split.P @ _kernels.pointwise_to_dense((J0 - Jx) @ Jx)
    Dx = np.eye(C2.shape[0]) - C2
    return (
        LoopOperator(Dx, "D_x", N),
        LoopOperator(C1, "C1_x", N),
        LoopOperator(C2, "C2_x", N),
    )


def d_inverse_bound(Dx, G):
    """Smallest c2 with |X| <= c2 |D_x X| in the discrete L^2(g) norm."""
    L = np.linalg.cholesky(G)
    M = L.T @ Dx.matrix @ np.linalg.inv(L.T)
    return 1.0 / float(np.linalg.svd(M, compute_uv=False)[-1])


# --------------------------------------------------------------- cylinders


@dataclass
class CylinderGrid:
    """Discrete cylinder: values[m] is the loop Z(s_m) in chart coordinates."""

    s_grid: np.ndarray
    values: np.ndarray
    provenance: str
    d: int = 1
    residual: float = math.nan
    derivative: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in ("spectral", "newton", "synthetic"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.s_grid = np.asarray(self.s_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)

    @property
    def n_points(self):
        return self.values.shape[1]

    @property
    def slices(self):
        return [LoopGrid(v, self.d) for v in self.values]

    def to_csv(self, path):
        M, N, m = self.values.shape
        t = np.arange(N) / N
        rows = np.column_stack(
            [np.repeat(self.s_grid, N), np.tile(t, M), self.values.reshape(M * N, m)]
        )
        head = ",".join(["s", "t"] + [f"q{i}" for i in range(m)])
        np.savetxt(path, rows, delimiter=",", header=head, comments="", fmt="%.17g")


def _flat_slices(values):
    return np.transpose(values, (0, 2, 1)).reshape(values.shape[0], -1)


def _unflat_slices(flat, N):
    M = flat.shape[0]
    return np.transpose(flat.reshape(M, -1, N), (0, 2, 1))


def linear_stable_evolution(split, Z0, s_grid, pos_tol=1e-8):
    """Exact solution of dZ/ds = A0 Z on the nonpositive spectral subspace."""
    s = np.asarray(s_grid, dtype=float)
    c = split.coefficients(flat(Z0))
    pos = ~split.nonpositive_mask()
    V = split.eigenvectors
    mass = split.norm(V[:, pos] @ c[pos]) if np.any(pos) else 0.0
    if mass > pos_tol:
        warnings.warn(f"filtered positive-mode mass {mass:.3e}", UserWarning, stacklevel=2)
    # resolved kernel enters as the exact constant P Z0, the rest modewise
    ker = np.abs(split.eigenvalues) < split.kernel_tol
    rest = ~pos & ~ker
    lam = split.eigenvalues[rest]
    Vn = V[:, rest]
    cn = c[rest]
    # rounding-level coefficients would seed stiff high-frequency noise at s = 0
    cn = np.where(np.abs(cn) > 64 * np.finfo(float).eps * split.norm(flat(Z0)), cn, 0.0)
    E = np.exp(np.outer(s, lam)) * cn
    const = split.P @ flat(Z0)
    if split.n_grid_modes:
        B = split.grid_basis
        const = const + B @ (B.T @ split.G @ flat(Z0))
    vals = _unflat_slices(E @ Vn.T + const[None, :], split.n_points)
    ders = _unflat_slices((E * lam) @ Vn.T, split.n_points)
    return CylinderGrid(s, vals, "spectral", Z0.d or 1, 0.0, ders, {"filtered_mass": mass})


# --------------------------------------------------------------- Newton


def _floer_rhs(chart, Y, dmat, with_jac):
    """F(Y) = A_Y Y for each slice of Y (M, N, m); optionally its Jacobian blocks."""
    M, N, m = Y.shape
    t = np.tile(np.arange(N) / N, M)
    p = np.concatenate([shift_values(Y[k], +1) for k in range(M)])
    jets = Jets(chart, t, p, 1 if with_jac else 0)
    J = jets.J[0].reshape(M, N, m, m)
    S = jets.S[0].reshape(M, N, m, m)
    DY = np.einsum("tu,kui->kti", dmat, Y)
    w = DY + np.einsum("ktij,ktj->kti", S, Y)
    F = -np.einsum("ktij,ktj->kti", J, w)
    blocks = []
    if with_jac:
        dJ = jets.J[1].reshape(M, N, m, m, m)
        dS = jets.S[1].reshape(M, N, m, m, m)
        K = -np.einsum("ktijl,ktj->ktil", dJ, w) - np.einsum("ktij,ktjnl,ktn->ktil", J, dS, Y)
        for k in range(M):
            A = -(_kernels.pointwise_times_diff(J[k], dmat) + _kernels.pointwise_to_dense(J[k] @ S[k]))
            blocks.append(A + _kernels.pointwise_to_dense(K[k]))
    return F, blocks


def floer_residual(chart, values, s_grid, dmat):
    """Midpoint residual (Z_{m+1} - Z_m)/ds - A_Y Y with Y the midpoint, shape (M, N, m)."""
    ds = np.diff(s_grid)[:, None, None]
    Y = 0.5 * (values[1:] + values[:-1])
    F, _ = _floer_rhs(chart, Y, dmat, False)
    return (values[1:] - values[:-1]) / ds - F


def nonlinear_floer_solve(
    chart,
    split,
    Z_init,
    S_max=1.0,
    M=200,
    tol=NEWTON_TOL,
    newton_radius=NEWTON_RADIUS,
    max_iter=30,
    scheme="spectral",
):
    """Damped Newton for dZ/ds = A_Z Z on [0, S_max] with the implicit midpoint rule.

    Boundary rows: coefficients of Z_0 - Z_init on the nonpositive spectral
    subspace of A0 vanish; coefficients of Z_M on the positive subspace vanish.
    The linear systems are block-banded and solved with ``solve_banded``.
    """
    check_in_chart(Z_init, chart.chart_radius)
    N = Z_init.n_points
    qz = _unflat_slices((split.Q @ flat(Z_init))[None], N)[0]
    if float(np.max(np.abs(qz))) > newton_radius:
        raise PreconditionError(f"initial loop is farther than {newton_radius} from the constant loops")
    dmat = diff_matrix(N, scheme)
    s = np.linspace(0.0, S_max, M + 1)
    ds = S_max / M
    n = split.eigenvectors.shape[0]
    neg = split.nonpositive_mask()
    Wg = split.eigenvectors.T @ split.G
    Ws, Wu = Wg[neg], Wg[~neg]
    ns = Ws.shape[0]
    z0 = flat(Z_init)
    guess = linear_stable_evolution_quiet(split, Z_init, s)
    X = _flat_slices(guess)

    def residual(X):
        vals = _unflat_slices(X, N)
        E = _flat_slices(floer_residual(chart, vals, s, dmat))
        return np.concatenate([Ws @ (X[0] - z0), E.reshape(-1), Wu @ X[-1]])

    lo, up = ns + n - 1, 2 * n - 1 - ns
    r = residual(X)
    rn = float(np.max(np.abs(r)))
    history = [rn]
    stalls = 0
    it = 0
    eye = np.eye(n) / ds
    while rn > tol:
        if it >= max_iter:
            raise SolverError(f"Newton did not converge in {max_iter} iterations (residual {rn:.2e})")
        vals = _unflat_slices(X, N)
        Y = 0.5 * (vals[1:] + vals[:-1])
        _, blocks = _floer_rhs(chart, Y, dmat, True)
        total = (M + 1) * n
        ab = np.zeros((lo + up + 1, total))
        _kernels.fill_banded(ab, Ws, 0, 0, up)
        for k, JF in enumerate(blocks):
            r0 = ns + k * n
            _kernels.fill_banded(ab, -eye - 0.5 * JF, r0, k * n, up)
            _kernels.fill_banded(ab, eye - 0.5 * JF, r0, (k + 1) * n, up)
        _kernels.fill_banded(ab, Wu, ns + M * n, M * n, up)
        step = sla.solve_banded((lo, up), ab, -r, overwrite_ab=True, check_finite=False).reshape(M + 1, n)
        alpha = 1.0
        while True:
            Xn = X + alpha * step
            vmax = float(np.max(np.abs(Xn)))
            if vmax > chart.chart_radius:
                if alpha < 1 / 64:
                    raise DomainError(f"Newton iterate leaves the chart (sup {vmax:.3g})")
            else:
                rnew = residual(Xn)
                rnn = float(np.max(np.abs(rnew)))
                if rnn < rn or alpha < 1 / 64:
                    break
            alpha *= 0.5
        if rnn < rn:
            stalls = 0
        else:
            stalls += 1
            if stalls >= 5:
                raise SolverError("Newton stalled: no residual reduction over 5 damped steps")
        X, r, rn = Xn, rnew, rnn
        history.append(rn)
        it += 1
    vals = _unflat_slices(X, N)
    return CylinderGrid(s, vals, "newton", Z_init.d or 1, rn, None, {"history": history, "iterations": it})


def linear_stable_evolution_quiet(split, Z0, s):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return linear_stable_evolution(split, Z0, s).values


def _nyquist_rows(N, m):
    alt = (-1.0) ** np.arange(N) / N
    return np.kron(np.eye(m), alt[None, :])


def smooth_eigenvector(split, lam, rel=1e-8):
    """Member of the lam-eigenspace with no checkerboard content, sup-normalized.

    Even grids duplicate some eigenvalues with checkerboard copies; the
    null vector of the checkerboard functional on the eigenspace picks the
    smooth representative.
    """
    scale = max(1.0, abs(lam))
    idx = np.nonzero(np.abs(split.eigenvalues - lam) <= rel * scale)[0]
    B = split.eigenvectors[:, idx]
    _, sv, Vt = np.linalg.svd(_nyquist_rows(split.n_points, split.dim) @ B)
    coef = Vt[-1]
    if sv.size == B.shape[1] and sv[-1] > 1e-8:
        raise PreconditionError("eigenspace has no smooth member")
    vec = B @ coef
    return vec / np.max(np.abs(vec))


def floer_seed(split, amplitude=1e-3, d=1):
    """Smooth loop: least-negative mode plus half of the next smooth negative mode.

    The sum is rescaled to sup-norm ``amplitude``.
    """
    N = split.n_points
    lam = np.unique(np.round(split.eigenvalues[split.eigenvalues < -split.kernel_tol], 9))[::-1]
    vecs = []
    for value in lam:
        try:
            vecs.append(smooth_eigenvector(split, value))
        except PreconditionError:
            continue
        if len(vecs) == 2:
            break
    loop = _unflat_slices((vecs[0] + 0.5 * vecs[1])[None], N)[0]
    return LoopGrid(amplitude * loop / np.max(np.abs(loop)), d)


# --------------------------------------------------------------- checks on cylinders


@dataclass
class DsBReport:
    s_points: np.ndarray
    residuals: np.ndarray
    max_residual: float
    constant: float
    ds: float


def check_dsB_equals_C(chart, Z, floer_tol=1e-6, scheme="spectral", stride=1, s_points=None):
    """Central difference of s -> B_{Z(s)} against C_{Z(s)} in operator 2-norm at interior slices.

    ``s_points`` selects interior grid nodes explicitly (for comparing grids).
    """
    dmat = diff_matrix(Z.n_points, scheme)
    res = floer_residual(chart, Z.values, Z.s_grid, dmat)
    rmax = float(np.max(np.abs(res)))
    if rmax > floer_tol:
        raise PreconditionError(f"cylinder does not solve the Floer equation (residual {rmax:.2e})")
    ds = float(Z.s_grid[1] - Z.s_grid[0])
    if s_points is None:
        idx = np.arange(1, len(Z.s_grid) - 1, stride)
    else:
        idx = np.rint((np.asarray(s_points) - Z.s_grid[0]) / ds).astype(int)
        if np.any(idx < 1) or np.any(idx > len(Z.s_grid) - 2):
            raise PreconditionError("s_points must be interior grid nodes")
    need = sorted(set(idx) | set(idx - 1) | set(idx + 1))
    Bs = {m: build_B(chart, LoopGrid(Z.values[m], Z.d), scheme).matrix for m in need}
    out = []
    for m in idx:
        dB = (Bs[m + 1] - Bs[m - 1]) / (2 * ds)
        C = build_C(chart, LoopGrid(Z.values[m], Z.d), scheme).matrix
        out.append(float(np.linalg.norm(dB - C, 2)))
    out = np.array(out)
    mx = float(out.max()) if out.size else 0.0
    return DsBReport(Z.s_grid[idx], out, mx, mx / ds**2, ds)


def check_E_consistency(chart, Z, scheme="spectral"):
    """Max over interior slices of |E(Z(s)) - (Z, dZ/ds, d^2Z/ds^2)| with central differences."""
    ds = float(Z.s_grid[1] - Z.s_grid[0])
    v = Z.values
    worst = 0.0
    for m in range(1, len(Z.s_grid) - 1):
        _, e1, e2 = build_E(chart, LoopGrid(v[m], Z.d), scheme)
        d1 = (v[m + 1] - v[m - 1]) / (2 * ds)
        d2 = (v[m + 1] - 2 * v[m] + v[m - 1]) / ds**2
        worst = max(worst, float(np.max(np.abs(e1.values - d1))), float(np.max(np.abs(e2.values - d2))))
    return worst


# --------------------------------------------------------------- decay


@dataclass
class SeriesFit:
    rate: float
    envelope: float
    r_squared: float
    n_samples: int


def fit_series(s, y, noise_floor=NOISE_FLOOR, skip_frac=0.1, min_samples=10):
    """Log-linear fit of a positive decaying series; envelope is the smallest A with y <= A e^{-rate s}."""
    s = np.asarray(s, dtype=float)
    y = np.asarray(y, dtype=float)
    start = int(math.floor(skip_frac * len(s)))
    idx = np.arange(start, len(s))
    idx = idx[y[idx] > noise_floor]
    if idx.size < min_samples:
        raise FitError(f"only {idx.size} samples above the noise floor")
    slope, _, r2 = _loglinear(s[idx], y[idx])
    rate = -float(slope)
    env = float(np.max(y * np.exp(rate * (s - s[0]))))
    return SeriesFit(rate, env, float(r2), int(idx.size))


@dataclass
class DecayReport:
    s: np.ndarray
    l2_qnorm: np.ndarray
    h2_qnorm: np.ndarray
    dsu_sup: np.ndarray
    dsu_sup_ambient: np.ndarray
    dist: np.ndarray
    fits: dict
    rate_floor: float
    rates_ok: bool
    bound_ok: bool
    bound_max_ratio: float
    Xi: float
    stationary: bool

    @property
    def passed(self):
        return self.rates_ok and self.bound_ok

    def columns(self):
        return {
            "s": self.s,
            "dist": self.dist,
            "l2_qnorm": self.l2_qnorm,
            "h2_qnorm": self.h2_qnorm,
            "dsu_sup": self.dsu_sup,
        }


def cylinder_derivative(chart, Z, scheme="spectral"):
    """dZ/ds: exact for spectral cylinders, A_Z Z for Newton ones, central differences otherwise."""
    if Z.derivative is not None:
        return Z.derivative
    if Z.provenance == "newton":
        dmat = diff_matrix(Z.n_points, scheme)
        F, _ = _floer_rhs(chart, Z.values, dmat, False)
        return F
    return np.gradient(Z.values, Z.s_grid, axis=0, edge_order=2)


def measure_decay(chart, Z, split, scheme="spectral", rate_factor=0.85, noise_floor=NOISE_FLOOR, stationary_tol=1e-12):
    """Decay of |QZ|_{L2}, |QZ|_{H2} and sup_t |d_s u|, checked against rate_factor * sqrt(c0)."""
    N = Z.n_points
    G = split.G
    g0 = chart.metric0(N)
    H2 = sobolev_gram(g0, N, Z.values.shape[2], 2, scheme)
    F = _flat_slices(Z.values)
    # Z - PZ keeps constant slices exactly constant, so D^2 sees no rounding noise
    QF = F - F @ split.P.T
    l2 = np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", QF, G, QF), 0))
    h2 = np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", QF, H2, QF), 0))
    dZ = cylinder_derivative(chart, Z, scheme)
    dsu = np.max(np.sqrt(np.einsum("kti,tij,ktj->kt", dZ, g0, dZ)), axis=1)
    p = np.stack([shift_values(v, +1) for v in Z.values])
    amb = np.einsum("ktij,ktj->kti", chart.jacobian(p), dZ)
    dsu_amb = np.max(np.linalg.norm(amb, axis=-1), axis=1)
    dist = np.max(np.abs(Z.values[..., chart.d:]), axis=(1, 2))
    floor = rate_factor * math.sqrt(split.c0)
    Xi = float(l2[0])
    if float(np.max(l2)) <= stationary_tol:
        return DecayReport(Z.s_grid, l2, h2, dsu, dsu_amb, dist, {}, floor, True, True, 0.0, Xi, True)
    fits = {
        "l2_qnorm": fit_series(Z.s_grid, l2, noise_floor),
        "h2_qnorm": fit_series(Z.s_grid, h2, noise_floor),
        "dsu_sup": fit_series(Z.s_grid, dsu, noise_floor),
    }
    rates_ok = all(f.rate >= floor for f in fits.values())
    env = Xi * np.exp(-floor * (Z.s_grid - Z.s_grid[0]))
    ratio = float(np.max(l2 / np.where(env > 0, env, np.inf)))
    bound_ok = ratio <= 1.0 + 1e-9
    return DecayReport(Z.s_grid, l2, h2, dsu, dsu_amb, dist, fits, floor, rates_ok, bound_ok, ratio, Xi, False)


# --------------------------------------------------------------- maximum principle


@dataclass
class MaxPrincipleReport:
    passed: bool
    inequality_margin: float
    conclusion_margin: float
    equality: bool


def maximum_principle_check(f_samples, s_grid, delta, tail_ratio=1e-3, rel_tol=1e-8):
    """Check f'' >= delta^2 f by central differences, then f(s) <= f(s0) e^{-delta (s - s0)}."""
    f = np.asarray(f_samples, dtype=float)
    s = np.asarray(s_grid, dtype=float)
    if f.size < 5:
        raise PreconditionError("need at least 5 samples")
    if not f[-1] <= tail_ratio * f[0]:
        raise HypothesisError(
            f"tail does not decay: f(last)/f(first) = {f[-1] / f[0]:.3g} exceeds {tail_ratio:g}"
        )
    h0 = s[1:-1] - s[:-2]
    h1 = s[2:] - s[1:-1]
    f2 = 2 * (f[2:] / (h1 * (h0 + h1)) - f[1:-1] / (h0 * h1) + f[:-2] / (h0 * (h0 + h1)))
    scale = np.maximum(np.abs(f[1:-1]) * delta**2, 1e-300)
    ineq = float(np.min((f2 - delta**2 * f[1:-1]) / scale))
    bound = f[0] * np.exp(-delta * (s - s[0]))
    concl = float(np.min((bound[1:] - f[1:]) / np.maximum(bound[1:], 1e-300)))
    passed = ineq >= -rel_tol and concl >= -rel_tol
    return MaxPrincipleReport(passed, ineq, concl, abs(concl) <= 1e-9)


# --------------------------------------------------------------- Xi surrogate


def xi_surrogate(x, split):
    """Xi(x) = |Q x|_{L2(g)}; vanishes exactly on constant loops with z'' = 0."""
    return split.norm(split.Q @ flat(x))


@dataclass
class LipschitzReport:
    L: float
    finite: bool
    max_on_N: float


def xi_lipschitz_check(split, rng, chart, n_pairs=50, radius=0.05, scheme="spectral", modes=4):
    """Empirical Lipschitz constant of Xi against the discrete H^2 distance on random smooth loops."""
    N = split.n_points
    m = split.dim
    t = np.arange(N) / N
    H2 = sobolev_gram(chart.metric0(N), N, m, 2, scheme)

    def smooth_loop():
        v = np.zeros((N, m))
        for k in range(modes):
            a = rng.standard_normal((2, m)) / (1 + k) ** 3
            v += np.outer(np.cos(2 * math.pi * k * t), a[0]) + np.outer(np.sin(2 * math.pi * k * t), a[1])
        return LoopGrid(radius * v / np.max(np.abs(v)), split.d)

    L = 0.0
    for _ in range(n_pairs):
        x, y = smooth_loop(), smooth_loop()
        diff = flat(x) - flat(y)
        dist = math.sqrt(float(diff @ H2 @ diff))
        L = max(L, abs(xi_surrogate(x, split) - xi_surrogate(y, split)) / dist)
    on_N = 0.0
    for _ in range(10):
        c = LoopGrid(np.tile([rng.uniform(-radius, radius), 0.0], (N, 1)), split.d)
        on_N = max(on_N, xi_surrogate(c, split))
    return LipschitzReport(L, math.isfinite(L), on_N)


# --------------------------------------------------------------- helpers


def radial_setup(N=128, scheme="spectral", j_twist=0.0):
    """Model, chart, A0 and its spectral split for the default radial model."""
    model = radial_model(1, "quadratic", j_twist)
    chart = TubularChart(model)
    A0 = build_operator_A(LoopGrid(np.zeros((N, 2)), 1), chart, scheme)
    split = spectral_split(A0, chart.metric0(N), d=1)
    return model, chart, A0, split


def ahat_gram(split):
    return sla.block_diag(split.G, split.G, split.G)

