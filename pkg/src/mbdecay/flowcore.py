"""Trajectories, energies, spectral gaps and compactness diagnostics."""
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import _kernels
from .errors import CompactnessRefusal, PreconditionError
from .geometry import CHORDAL, riemannian_gradient

ENERGY_GUARD = 1e12


class IncompleteLimitWarning(UserWarning):
    """A trajectory lacks its limit point; the distance covers the finite grid only."""


@dataclass
class Trajectory:
    """Sampled gradient flow line.

    ``limit`` is the point at +infinity when detected; ``start_limit`` is the
    point at -infinity for two-sided (heteroclinic) trajectories.
    """

    s_grid: np.ndarray
    points: np.ndarray
    f_values: np.ndarray
    G_values: np.ndarray
    limit: Optional[np.ndarray] = None
    limit_quality: Optional[str] = None
    start_limit: Optional[np.ndarray] = None

    def __post_init__(self):
        self.s_grid = np.asarray(self.s_grid, dtype=float)
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.f_values = np.asarray(self.f_values, dtype=float)
        self.G_values = np.asarray(self.G_values, dtype=float)
        if self.s_grid.size > 1 and np.any(np.diff(self.s_grid) <= 0):
            raise PreconditionError("s_grid must be strictly increasing")

    def __len__(self):
        return self.s_grid.size

    def shifted(self, s0):
        """Same curve with grid moved by s0 (the class is translation invariant)."""
        return replace(self, s_grid=self.s_grid + s0)

    def restricted(self, s_start):
        """Tail starting at the first node with s >= s_start, regridded to start at 0."""
        i = int(np.searchsorted(self.s_grid, s_start - 1e-14))
        return replace(
            self,
            s_grid=self.s_grid[i:] - self.s_grid[i],
            points=self.points[i:],
            f_values=self.f_values[i:],
            G_values=self.G_values[i:],
            start_limit=None,
        )

    def sample(self, s):
        """Linear interpolation; beyond the grid the limits (or end points) are used."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        out = np.empty((s.size, self.points.shape[1]))
        for c in range(self.points.shape[1]):
            out[:, c] = np.interp(s, self.s_grid, self.points[:, c])
        if self.limit is not None:
            out[s > self.s_grid[-1]] = self.limit
        if self.start_limit is not None:
            out[s < self.s_grid[0]] = self.start_limit
        return out


def build_trajectory(M, f, s_grid, points, limit=None):
    """Trajectory with f and G = |grad f|^2 caches filled."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fv = np.array([f(p) for p in points])
    gv = np.array([float(np.sum(riemannian_gradient(M, f, p) ** 2)) for p in points])
    return Trajectory(np.asarray(s_grid, dtype=float), points, fv, gv, limit=limit)


@dataclass
class CriticalSetSample:
    """Finite sample of a critical set Z at level zeta.

    ``nearest`` (optional) maps a point to its nearest point on Z, e.g. radial
    projection for a circle; ``dim`` is the dimension of Z.
    """

    points: np.ndarray
    zeta: float
    dim: Optional[int] = None
    nearest: Optional[Callable] = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))

    def distance(self, p):
        p = np.asarray(p, dtype=float)
        if self.nearest is not None:
            return float(np.linalg.norm(p - self.nearest(p)))
        return float(np.min(np.linalg.norm(self.points - p[None, :], axis=1)))

    def distances(self, pts):
        return np.array([self.distance(p) for p in np.atleast_2d(pts)])

    def validate(self, M, f, f_tol=1e-8, grad_tol=1e-6):
        for p in self.points:
            if abs(f(p) - self.zeta) > f_tol:
                raise PreconditionError("Z sample point not on the level zeta")
            if np.linalg.norm(riemannian_gradient(M, f, p)) > grad_tol:
                raise PreconditionError("Z sample point is not critical")


@dataclass
class ModuliFamily:
    members: List[Trajectory]
    E0: float
    a: float = 0.0


def energy_of(traj):
    """Trapezoid integral of G along the trajectory (inf if the tail blows up)."""
    s, g = traj.s_grid, traj.G_values
    if s.size < 2:
        return 0.0
    if not np.all(np.isfinite(g)):
        return math.inf
    seg = 0.5 * (g[1:] + g[:-1]) * np.diff(s)
    if seg[-1] > ENERGY_GUARD or not np.isfinite(seg.sum()):
        return math.inf
    return float(seg.sum())


def flow_identity_residual(traj):
    """Max over interior nodes of |(f o gamma)' - G|, 3-point derivative."""
    s, fv, gv = traj.s_grid, traj.f_values, traj.G_values
    if s.size < 3:
        raise PreconditionError("need at least 3 grid nodes")
    h1 = s[1:-1] - s[:-2]
    h2 = s[2:] - s[1:-1]
    df = (
        -h2 / (h1 * (h1 + h2)) * fv[:-2]
        + (h2 - h1) / (h1 * h2) * fv[1:-1]
        + h1 / (h2 * (h1 + h2)) * fv[2:]
    )
    return float(np.max(np.abs(df - gv[1:-1])))


def spectral_gap(critical_values, zeta, mode="positive"):
    """Gap between zeta and competing critical values; +inf when none compete."""
    vals = np.asarray(list(critical_values), dtype=float)
    if mode == "positive":
        c = zeta - vals[vals <= zeta]
    elif mode == "negative":
        c = vals[vals >= zeta] - zeta
    elif mode == "ordinary":
        return min(spectral_gap(vals, zeta, "positive"), spectral_gap(vals, zeta, "negative"))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return float(c.min()) if c.size else math.inf


def _common_grid(trajs):
    grid = trajs[0].s_grid
    for t in trajs[1:]:
        if t.s_grid.shape != grid.shape or not np.array_equal(t.s_grid, grid):
            return np.unique(np.concatenate([t.s_grid for t in trajs]))
    return grid


def _on_grid(traj, grid):
    if traj.s_grid.shape == grid.shape and np.array_equal(traj.s_grid, grid):
        return traj.points
    return traj.sample(grid)


def uniform_distance(t1, t2, metric=CHORDAL):
    """Sup distance over grid nodes and the limit points at infinity."""
    grid = _common_grid([t1, t2])
    p1 = _on_grid(t1, grid)
    p2 = _on_grid(t2, grid)
    if metric is CHORDAL:
        d = float(np.max(np.linalg.norm(p1 - p2, axis=1)))
    else:
        d = max(metric(a, b) for a, b in zip(p1, p2))
    if t1.limit is None or t2.limit is None:
        warnings.warn("limit missing; distance over the finite grid only", IncompleteLimitWarning)
        return d
    return max(d, metric(t1.limit, t2.limit))


def distance_matrix(members, metric=CHORDAL):
    """Pairwise uniform distances of a family on a common grid."""
    grid = _common_grid(members)
    if metric is CHORDAL:
        paths = np.stack([_on_grid(m, grid) for m in members])
        mat = _kernels.sup_distance_matrix(paths)
    else:
        k = len(members)
        mat = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                mat[i, j] = mat[j, i] = uniform_distance(members[i], members[j], metric)
        return mat
    k = len(members)
    for i in range(k):
        for j in range(i + 1, k):
            li, lj = members[i].limit, members[j].limit
            if li is not None and lj is not None:
                mat[i, j] = mat[j, i] = max(mat[i, j], metric(li, lj))
    return mat


def greedy_net(dmat, eps):
    """Greedy eps-net: returns representative indices and assignment per member."""
    reps = []
    assign = []
    for i in range(dmat.shape[0]):
        hit = [r for r in reps if dmat[i, r] <= eps]
        if hit:
            assign.append(hit[0])
        else:
            reps.append(i)
            assign.append(i)
    return reps, assign


@dataclass
class CertificateReport:
    passed: bool
    window_violations: list
    energy_violations: list
    entry_times: list
    s0: float
    distance_matrix: np.ndarray
    representatives: list
    assignment: list
    eps_cluster: float
    r: float
    notes: list = field(default_factory=list)


def entry_time(traj, Z, r):
    """First s after which every later point is within r of Z (inf if none)."""
    d = Z.distances(traj.points)
    if traj.limit is not None:
        tail_ok = Z.distance(traj.limit) <= r
    else:
        tail_ok = True
    inside = d <= r
    suffix = np.logical_and.accumulate(inside[::-1])[::-1]
    if not tail_ok or not suffix[-1]:
        return math.inf
    return float(traj.s_grid[int(np.argmax(suffix))])


def compactness_certificate(
    family, Z, metric=CHORDAL, gap=math.inf, r=0.5, eps_cluster=1e-2, tol=1e-6
):
    """Empirical compactness check for a family of flow lines ending in Z.

    Checks the action window [zeta - E0, zeta], a uniform entry time into the
    r-tube around Z, and builds a greedy eps-net from pairwise uniform
    distances.  Refuses when E0 reaches the spectral gap.
    """
    if not family.members:
        raise PreconditionError("empty family")
    if family.E0 >= gap:
        raise CompactnessRefusal(
            f"E0={family.E0:g} reaches the spectral gap {gap:g}: time shifts of a flow line "
            "between neighbouring critical levels escape every compact set, so no certificate "
            "is issued at this energy"
        )
    zeta = Z.zeta
    window, energy_bad, entries = [], [], []
    for k, m in enumerate(family.members):
        bad = np.nonzero((m.f_values < zeta - family.E0 - tol) | (m.f_values > zeta + tol))[0]
        if bad.size:
            window.append((k, bad.tolist()))
        e = energy_of(m)
        if e > family.E0 + tol:
            energy_bad.append((k, e))
        entries.append(entry_time(m, Z, r))
    dmat = distance_matrix(family.members, metric)
    reps, assign = greedy_net(dmat, eps_cluster)
    s0 = max(entries)
    covered = all(dmat[i, a] <= eps_cluster for i, a in enumerate(assign))
    passed = not window and not energy_bad and math.isfinite(s0) and covered
    notes = ["condition (A1) quantifies over all sequences; only its consequences on this family are checked"]
    return CertificateReport(passed, window, energy_bad, entries, s0, dmat, reps, assign, eps_cluster, r, notes)


def delta_neighborhood_estimate(family, U_membership, zeta, n_grid=2001, delta_max=None):
    """Largest grid delta with: zeta - f(gamma(s)) <= delta implies gamma(s) in U."""
    gaps, inside = [], []
    for m in family.members:
        gaps.append(zeta - m.f_values)
        inside.append(np.array([bool(U_membership(p)) for p in m.points]))
    gaps = np.concatenate(gaps)
    inside = np.concatenate(inside)
    if delta_max is None:
        delta_max = float(max(gaps.max(), 0.0))
    grid = np.linspace(0.0, delta_max, n_grid)
    bad = gaps[~inside]
    limit = bad.min() if bad.size else math.inf
    ok = grid[(grid < limit) & (grid > 0)]
    return float(ok.max()) if ok.size else 0.0


@dataclass
class ShorteningReport:
    passed: bool
    worst_slack: float
    checked_nodes: int
    violations: list


def shortening_bound_check(family, Xi, U_membership, metric=CHORDAL, Z=None, tol=1e-9, xi_tol=1e-8):
    """Check d(gamma(b), gamma(inf)) <= Xi(gamma(b)) on tails inside U."""
    if Z is not None:
        for z in Z.points:
            if U_membership(z) and Xi(z) > xi_tol:
                raise PreconditionError("Xi does not vanish on Z inside U")
    worst = -math.inf
    count = 0
    violations = []
    for k, m in enumerate(family.members):
        if m.limit is None:
            raise PreconditionError(f"member {k} has no limit")
        inside = np.array([bool(U_membership(p)) for p in m.points])
        tail = np.logical_and.accumulate(inside[::-1])[::-1]
        for i in np.nonzero(tail)[0]:
            slack = metric(m.points[i], m.limit) - Xi(m.points[i])
            count += 1
            worst = max(worst, slack)
            if slack > tol:
                violations.append((k, int(i), float(slack)))
    if count == 0:
        worst = 0.0
    return ShorteningReport(not violations, float(worst), count, violations)
