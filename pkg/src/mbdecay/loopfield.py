"""Discrete loop calculus on the circle R/Z.

Loops are sampled at N equispaced nodes ``t_j = j/N``.  A loop with values
in R^m is an (N, m) array; flattening is component-major, so the
derivative acts block-diagonally as ``kron(I_m, D)``.
"""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from . import _kernels
from .errors import DomainError, PreconditionError

KERNEL_REL = 1e-6
ASYM_TOL = 1e-6
GAUSS_NODES = 32


# --------------------------------------------------------------- data types


@dataclass
class LoopGrid:
    """Loop sampled on N nodes; columns are (theta, z', z'') with z'' the last dim - d."""

    values: np.ndarray
    d: Optional[int] = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))

    @property
    def n_points(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def t(self):
        return np.arange(self.n_points) / self.n_points

    def flatten(self):
        return self.values.T.reshape(-1).copy()

    @classmethod
    def from_flat(cls, vec, n_points, d=None):
        vec = np.asarray(vec, dtype=float)
        return cls(vec.reshape(-1, n_points).T.copy(), d)

    @classmethod
    def constant(cls, vec, n_points, d=None):
        return cls(np.tile(np.asarray(vec, dtype=float), (n_points, 1)), d)

    def zpp(self):
        if self.d is None:
            raise PreconditionError("loop has no z'' split (d unknown)")
        return self.values[:, self.d:]


def flat(X):
    return X.flatten() if isinstance(X, LoopGrid) else np.asarray(X, dtype=float)


@dataclass
class LoopOperator:
    """Dense matrix on flattened loops."""

    matrix: np.ndarray
    label: str = ""
    n_points: Optional[int] = None

    def apply(self, X):
        y = self.matrix @ flat(X)
        if isinstance(X, LoopGrid):
            return LoopGrid.from_flat(y, X.n_points, X.d)
        return y

    def __matmul__(self, other):
        if isinstance(other, LoopOperator):
            return LoopOperator(self.matrix @ other.matrix, f"{self.label}*{other.label}", self.n_points)
        return self.apply(other)

    def __add__(self, other):
        return LoopOperator(self.matrix + other.matrix, f"{self.label}+{other.label}", self.n_points)

    def __sub__(self, other):
        return LoopOperator(self.matrix - other.matrix, f"{self.label}-{other.label}", self.n_points)

    def scaled(self, c):
        return LoopOperator(c * self.matrix, self.label, self.n_points)

    @property
    def shape(self):
        return self.matrix.shape

    def norm(self):
        return float(np.linalg.norm(self.matrix, 2))


# --------------------------------------------------------------- derivative


def diff_matrix(N, scheme="spectral"):
    """N x N periodic differentiation matrix on [0, 1).

    ``spectral``: trigonometric interpolation derivative (even N), exact on
    modes |k| < N/2.  ``fd4``: fourth-order central differences.
    """
    if N < 8:
        raise ValueError("N must be at least 8")
    if scheme == "spectral":
        if N % 2:
            raise ValueError("spectral scheme needs even N")
        j = np.arange(N)
        k = (j[:, None] - j[None, :]) % N
        with np.errstate(divide="ignore", invalid="ignore"):
            col = math.pi * (-1.0) ** np.arange(N) / np.tan(math.pi * np.arange(N) / N)
        col[0] = 0.0
        D = col[k]
        return 0.5 * (D - D.T)
    if scheme == "fd4":
        D = np.zeros((N, N))
        coef = {-2: 1.0 / 12, -1: -2.0 / 3, 1: 2.0 / 3, 2: -1.0 / 12}
        for off, c in coef.items():
            D[np.arange(N), (np.arange(N) + off) % N] = c * N
        return D
    raise ValueError(f"unknown scheme {scheme!r}")


def derivative_matrix(N, dim, scheme="spectral"):
    """Block-diagonal d/dt on flattened loops with values in R^dim."""
    return LoopOperator(np.kron(np.eye(dim), diff_matrix(N, scheme)), "d/dt", N)


def apply_diff(values, dmat):
    """d/dt of node values (N, ...) along axis 0."""
    sh = values.shape
    return (dmat @ values.reshape(sh[0], -1)).reshape(sh)


# --------------------------------------------------------------- metrics


def metric_field(g_family, N, dim):
    """Broadcast a metric spec (None, (m, m) or (N, m, m)) to (N, m, m), checking SPD."""
    if g_family is None:
        g = np.broadcast_to(np.eye(dim), (N, dim, dim)).copy()
    else:
        g = np.asarray(g_family, dtype=float)
        if g.ndim == 2:
            g = np.broadcast_to(g, (N, dim, dim)).copy()
    if g.shape != (N, dim, dim):
        raise DomainError(f"metric field has shape {g.shape}, expected {(N, dim, dim)}")
    if not np.allclose(g, np.transpose(g, (0, 2, 1)), rtol=1e-12, atol=1e-12):
        raise DomainError("metric not symmetric")
    if np.min(np.linalg.eigvalsh(g)) <= 0:
        raise DomainError("metric not positive definite")
    return g


def gram_matrix(g_family, N, dim):
    """Discrete L^2 Gram matrix (rectangle rule, weight 1/N)."""
    return _kernels.pointwise_to_dense(metric_field(g_family, N, dim)) / N


def sobolev_gram(g_family, N, dim, k=0, scheme="spectral"):
    """Discrete H^k Gram matrix: sum_j (D^j)^T G D^j."""
    G = gram_matrix(g_family, N, dim)
    D = derivative_matrix(N, dim, scheme).matrix
    out = G.copy()
    Dj = np.eye(N * dim)
    for _ in range(k):
        Dj = D @ Dj
        out = out + Dj.T @ G @ Dj
    return out


def loop_inner_product(X, Y, g_family=None, k=0, scheme="spectral"):
    """Rectangle-rule sum of g_t pairings of d^j X, d^j Y for j <= k."""
    if X.values.shape != Y.values.shape:
        raise PreconditionError("loops live on different grids")
    N, m = X.values.shape
    g = metric_field(g_family, N, m)
    D = diff_matrix(N, scheme)
    a, b = X.values, Y.values
    total = 0.0
    for j in range(k + 1):
        if j:
            a = D @ a
            b = D @ b
        total += np.einsum("ti,tij,tj->", a, g, b) / N
    return float(total)


def loop_norm(X, g_family=None, k=0, scheme="spectral"):
    return math.sqrt(max(loop_inner_product(X, X, g_family, k, scheme), 0.0))


# --------------------------------------------------------------- shifts


def shift_values(values, sign):
    """Add (sign) * (t, 0) to loop values; theta wrapped into [0,1) or [-1/2,1/2)."""
    v = np.array(values, dtype=float)
    N = v.shape[0]
    t = np.arange(N) / N
    if sign > 0:
        v[:, 0] = np.mod(v[:, 0] + t, 1.0)
    else:
        v[:, 0] = np.mod(v[:, 0] - t + 0.5, 1.0) - 0.5
    return v


# --------------------------------------------------------------- operator A


def embed_zpp(S, dim, d):
    """(N, dim, dim - d) field -> (N, dim, dim) acting on the full vector via z''."""
    out = np.zeros(S.shape[:-1] + (dim,))
    out[..., d:] = S
    return out


def check_in_chart(x, radius):
    r = float(np.max(np.abs(x.values))) if x.values.size else 0.0
    if r > radius:
        raise DomainError(f"loop leaves the chart (sup norm {r:.3g} > {radius:.3g})")


def operator_from_fields(J, S, d, dmat):
    """Matrix of X -> -J (dX/dt + S z''(X)) for pointwise fields J (N,m,m), S (N,m,m-d)."""
    m = J.shape[1]
    JS = np.einsum("tij,tjk->tik", J, embed_zpp(S, m, d))
    return -(_kernels.pointwise_times_diff(J, dmat) + _kernels.pointwise_to_dense(JS))


def build_operator_A(x, model, scheme="spectral", dmat=None):
    """Operator A_x X = -J_t(S+x) (dX/dt + S(S+x) z''(X)) on flattened loops.

    ``model`` supplies ``J_field(t, q)``, ``S_field(q)``, ``d`` and
    ``chart_radius`` in chart coordinates.
    """
    check_in_chart(x, model.chart_radius)
    N = x.n_points
    if dmat is None:
        dmat = diff_matrix(N, scheme)
    p = shift_values(x.values, +1)
    J = model.J_field(x.t, p)
    S = model.S_field(p)
    return LoopOperator(operator_from_fields(J, S, model.d, dmat), "A_x", N)


# --------------------------------------------------------------- adjoints


def pdo_matrix(R, S, dmat):
    """Matrix of X -> R dX/dt + S X for pointwise fields R, S (N, m, m)."""
    return _kernels.pointwise_times_diff(R, dmat) + _kernels.pointwise_to_dense(S)


def _field(a, N, m):
    a = np.asarray(a, dtype=float)
    return np.broadcast_to(a, (N, m, m)).copy() if a.ndim == 2 else a


def adjoint_operator(R, S, g_family=None, dmat=None, N=None):
    """g-adjoint of X -> R dX/dt + S X via an orthonormal frame of g_t.

    With g_t = Phi_t^T Phi_t, the operator becomes R~ d/dt + S~ in the frame,
    R~ = Phi R Phi^-1, S~ = Phi S Phi^-1 + Phi R d/dt(Phi^-1); its Euclidean
    adjoint is -R~^T d/dt + (S~^T - d/dt R~^T), pulled back by Phi.
    """
    R = np.asarray(R, dtype=float)
    if N is None:
        N = R.shape[0] if R.ndim == 3 else dmat.shape[0]
    m = R.shape[-1]
    if dmat is None:
        dmat = diff_matrix(N)
    R = _field(R, N, m)
    S = _field(S, N, m)
    g = metric_field(g_family, N, m)
    try:
        L = np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise DomainError("metric not positive definite") from exc
    Phi = np.transpose(L, (0, 2, 1))
    Phi_inv = np.linalg.inv(Phi)
    Rt = Phi @ R @ Phi_inv
    St = Phi @ S @ Phi_inv + Phi @ R @ apply_diff(Phi_inv, dmat)
    RtT = np.transpose(Rt, (0, 2, 1))
    adj_t = pdo_matrix(-RtT, np.transpose(St, (0, 2, 1)) - apply_diff(RtT, dmat), dmat)
    Pinv = _kernels.pointwise_to_dense(Phi_inv)
    P = _kernels.pointwise_to_dense(Phi)
    return LoopOperator(Pinv @ adj_t @ P, "adjoint", N)


def discrete_adjoint(op, G):
    """Exact adjoint of a matrix in the discrete inner product with Gram matrix G."""
    return LoopOperator(np.linalg.solve(G, op.matrix.T @ G), f"{op.label}*", op.n_points)


# --------------------------------------------------------------- spectral split


@dataclass
class SpectralSplit:
    """Eigen-decomposition of a g-self-adjoint operator with kernel projections.

    ``kernel_basis`` holds the resolved kernel (constant loops with z''=0);
    ``grid_basis`` holds zero modes with no constant component (the
    checkerboard mode annihilated by every even-N skew difference matrix).
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    kernel_basis: np.ndarray
    grid_basis: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    c0: float
    kernel_tol: float
    G: np.ndarray
    n_points: int
    dim: int
    d: Optional[int]
    asymmetry: float
    kernel_constant_defect: float
    kernel_zpp_defect: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def kernel_dim(self):
        return self.kernel_basis.shape[1]

    @property
    def n_grid_modes(self):
        return self.grid_basis.shape[1]

    def norm(self, vec, G=None):
        G = self.G if G is None else G
        return math.sqrt(max(float(vec @ G @ vec), 0.0))

    def remove_grid_modes(self, vec):
        if self.grid_basis.size == 0:
            return vec
        B = self.grid_basis
        return vec - B @ (B.T @ self.G @ vec)

    def nonpositive_mask(self):
        return self.eigenvalues < self.kernel_tol

    def coefficients(self, vec):
        return self.eigenvectors.T @ self.G @ vec


def _constant_loops(N, dim):
    return np.kron(np.eye(dim), np.ones((N, 1)))


def spectral_split(A0, g_family=None, d=None, kernel_rel=KERNEL_REL, asym_tol=ASYM_TOL):
    """Generalized symmetric eigenproblem of A0 in the discrete g inner product."""
    mat = A0.matrix
    n = mat.shape[0]
    N = A0.n_points
    if N is None:
        raise PreconditionError("operator lacks n_points")
    dim = n // N
    G = gram_matrix(g_family, N, dim)
    GA = G @ mat
    scale = np.linalg.norm(GA)
    asym = float(np.linalg.norm(GA - GA.T) / scale) if scale > 0 else 0.0
    if asym > asym_tol:
        raise DomainError(f"operator is not self-adjoint in g (relative asymmetry {asym:.2e})")
    lam, V = sla.eigh(0.5 * (GA + GA.T), G)
    order = np.argsort(lam)
    lam, V = lam[order], V[:, order]
    tol = kernel_rel * float(np.max(np.abs(lam)))
    kidx = np.nonzero(np.abs(lam) < tol)[0]
    K = V[:, kidx]
    C = _constant_loops(N, dim)
    Cg = C @ np.linalg.inv(sla.sqrtm(C.T @ G @ C).real)
    if K.shape[1]:
        U, sig, Wt = np.linalg.svd(K.T @ G @ Cg)
        nres = int(np.sum(sig > 0.5))
    else:
        U, sig, Wt, nres = np.zeros((0, 0)), np.zeros(0), np.zeros((0, dim)), 0
    resolved_in_K = K @ U[:, :nres] if nres else np.zeros((n, 0))
    consts = Cg @ Wt[:nres].T if nres else np.zeros((n, 0))
    const_defect = 0.0
    zpp_defect = 0.0
    if nres:
        sgn = np.sign(np.sum(resolved_in_K * (G @ consts), axis=0))
        const_defect = float(np.max(np.abs(resolved_in_K - consts * sgn)))
    basis = consts.copy()
    if d is not None and nres:
        blocks = basis.reshape(dim, N, nres)
        zpp_defect = float(np.max(np.abs(blocks[d:]))) if dim > d else 0.0
        blocks[d:] = 0.0
        basis = blocks.reshape(n, nres)
    if nres:
        basis = basis @ np.linalg.inv(sla.sqrtm(basis.T @ G @ basis).real)
        P = basis @ (basis.T @ G)
    else:
        P = np.zeros((n, n))
    grid = K @ U[:, nres:] if K.shape[1] > nres else np.zeros((n, 0))
    nz = np.abs(lam) >= tol
    c0 = float(np.min(np.abs(lam[nz])) ** 2) if np.any(nz) else math.inf
    return SpectralSplit(
        lam, V, basis, grid, P, np.eye(n) - P, c0, tol, G, N, dim, d, asym, const_defect, zpp_defect
    )


# --------------------------------------------------------------- facts


@dataclass
class FactsReport:
    passed: bool
    residuals: dict
    threshold: float
    self_adjoint_residual: float
    coercivity_min_ratio: float
    coercivity_h1_min_ratio: float
    coercivity_violations: int
    c0: float
    kernel_dim: int
    n_grid_modes: int
    violations: list


def check_operator_facts(split, A0, A_list, D, n_random=100, rng=None, sa_tol=1e-6, rel_tol=1e-8):
    """Residuals of QA0=A0, A_xQ=A_x, DQ=D, self-adjointness and coercivity of A0 on range Q."""
    rng = np.random.default_rng(0) if rng is None else rng
    A = A0.matrix
    Q = split.Q
    nA = float(np.linalg.norm(A, 2))
    thr = rel_tol * nA
    res = {
        "QA0-A0": float(np.linalg.norm(Q @ A - A, 2)),
        "AxQ-Ax": max((float(np.linalg.norm(Ax.matrix @ Q - Ax.matrix, 2)) for Ax in A_list), default=0.0),
        "DQ-D": float(np.linalg.norm(D.matrix @ Q - D.matrix, 2)),
    }
    violations = [k for k, v in res.items() if v > thr]
    G = split.G
    n = A.shape[0]
    sa = 0.0
    for _ in range(n_random):
        x = rng.standard_normal(n)
        y = rng.standard_normal(n)
        lhs = (A @ x) @ G @ y - x @ G @ (A @ y)
        sa = max(sa, float(abs(lhs)) / (split.norm(x) * split.norm(y)))
    if sa > sa_tol:
        violations.append("self-adjoint")
    H1 = G + D.matrix.T @ G @ D.matrix
    tol = 1e-8 * split.c0
    worst = math.inf
    worst_h1 = math.inf
    bad = 0
    for _ in range(n_random):
        x = split.remove_grid_modes(rng.standard_normal(n))
        qx = Q @ x
        a = A @ qx
        num = float(a @ G @ a)
        den = float(qx @ G @ qx)
        if den == 0:
            continue
        worst = min(worst, num / den)
        worst_h1 = min(worst_h1, num / float(qx @ H1 @ qx))
        if num < (split.c0 - tol) * den:
            bad += 1
    if bad:
        violations.append("coercivity")
    return FactsReport(
        not violations, res, thr, sa, worst, worst_h1, bad, split.c0, split.kernel_dim,
        split.n_grid_modes, violations,
    )


# --------------------------------------------------------------- Hadamard


def _gauss_unit(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def fd_jacobian(F, q, h=1e-6):
    """Central-difference Jacobian of a vectorized map (..., m) -> (..., k)."""
    q = np.asarray(q, dtype=float)
    m = q.shape[-1]
    cols = []
    for i in range(m):
        e = np.zeros(m)
        e[i] = h
        cols.append((F(q + e) - F(q - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def hadamard_factor(F, point, d, jac=None, n_quad=GAUSS_NODES, slice_tol=1e-10, check=True):
    """Matrix S with F(p) = S(p) z''(p) for F vanishing on {z''=0}.

    Column i is the radial integral of dF/dz''_i along the segment from the
    slice point (theta, z', 0) to p, by Gauss-Legendre quadrature.
    Vectorized over leading axes of ``point``.
    """
    p = np.asarray(point, dtype=float)
    if check:
        base = p.copy()
        base[..., d:] = 0.0
        r0 = float(np.max(np.abs(F(base))))
        if r0 > slice_tol:
            raise PreconditionError(f"F does not vanish on z''=0 (residual {r0:.2e})")
    jac = jac or (lambda q: fd_jacobian(F, q))
    r, w = _gauss_unit(n_quad)
    pts = np.repeat(p[..., None, :], n_quad, axis=-2).copy()
    pts[..., d:] *= r[:, None]
    Jq = jac(pts)
    return np.einsum("q,...qij->...ij", w, Jq[..., d:])
