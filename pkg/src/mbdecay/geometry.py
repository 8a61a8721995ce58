"""Embedded manifolds, scalar fields and coarse metrics.

Manifolds are level sets ``c(p) = 0`` in Euclidean space with the induced
metric.  Distances are chordal.
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError

ON_MANIFOLD_TOL = 1e-8
CRITICAL_TOL = 1e-6
GRAD_STEP = 1e-5
HESS_STEP = 1e-4
KERNEL_REL = 1e-6
KERNEL_FLOOR = 1e-6


@dataclass(frozen=True)
class EmbeddedManifold:
    """Level set ``{constraint = 0}`` in R^ambient_dim.

    ``constraint`` is None for the whole ambient space.  ``constraint_jacobian``
    returns the (m - d_M) x m Jacobian and is required whenever ``constraint``
    is given.
    """

    ambient_dim: int
    intrinsic_dim: int
    constraint: Optional[Callable] = None
    constraint_jacobian: Optional[Callable] = None
    name: str = "manifold"
    projector: Optional[Callable] = None

    def residual(self, p):
        if self.constraint is None:
            return 0.0
        return float(np.max(np.abs(np.atleast_1d(self.constraint(p)))))

    def tangent_projector(self, p):
        p = np.asarray(p, dtype=float)
        if self.projector is not None:
            return self.projector(p)
        eye = np.eye(self.ambient_dim)
        if self.constraint is None:
            return eye
        jac = np.atleast_2d(self.constraint_jacobian(p))
        return eye - jac.T @ np.linalg.solve(jac @ jac.T, jac)

    def newton_step(self, p):
        """One Gauss-Newton step towards the constraint set."""
        p = np.asarray(p, dtype=float)
        if self.constraint is None:
            return p.copy()
        c = np.atleast_1d(self.constraint(p))
        jac = np.atleast_2d(self.constraint_jacobian(p))
        return p - jac.T @ np.linalg.solve(jac @ jac.T, c)

    def retract(self, p, tol=1e-15, max_iter=50):
        """Iterate ``newton_step`` until the constraint is below ``tol``."""
        q = np.asarray(p, dtype=float)
        for _ in range(max_iter):
            if self.residual(q) <= tol:
                break
            q = self.newton_step(q)
        return q

    def check_point(self, p, tol=ON_MANIFOLD_TOL):
        r = self.residual(p)
        if r > tol:
            raise DomainError(f"point is off the manifold (constraint residual {r:.3e})")


def euclidean(m):
    """All of R^m."""
    eye = np.eye(m)
    return EmbeddedManifold(ambient_dim=m, intrinsic_dim=m, name=f"R{m}", projector=lambda p: eye)


def sphere(m=3, radius=1.0):
    """Round sphere of the given radius in R^m."""
    r2 = float(radius) ** 2

    def constraint(p):
        return np.array([np.dot(p, p) - r2])

    def jac(p):
        return 2.0 * np.asarray(p, dtype=float)[None, :]

    eye = np.eye(m)

    def proj(p):
        return eye - np.outer(p, p) / np.dot(p, p)

    return EmbeddedManifold(m, m - 1, constraint, jac, name=f"S{m - 1}", projector=proj)


@dataclass(frozen=True)
class ScalarField:
    """Smooth function with optional analytic gradient and Hessian."""

    value: Callable
    gradient: Optional[Callable] = None
    hessian: Optional[Callable] = None
    name: str = "f"

    def __call__(self, p):
        return float(self.value(np.asarray(p, dtype=float)))

    def ambient_gradient(self, p):
        p = np.asarray(p, dtype=float)
        if self.gradient is not None:
            return np.asarray(self.gradient(p), dtype=float)
        return fd_gradient(self.value, p)


def fd_gradient(fun, p, rel_step=GRAD_STEP):
    """Central-difference gradient with step rel_step*(1+|p|)."""
    p = np.asarray(p, dtype=float)
    h = rel_step * (1.0 + np.linalg.norm(p))
    out = np.empty_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        out[i] = (fun(p + e) - fun(p - e)) / (2.0 * h)
    return out


def chordal(p, q):
    return float(np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)))


@dataclass(frozen=True)
class CoarseMetric:
    """A metric on points; default is ambient chordal distance."""

    dist: Callable = chordal
    name: str = "chordal"

    def __call__(self, p, q):
        return self.dist(p, q)


CHORDAL = CoarseMetric()


def coarse_distance(p, q):
    """Ambient Euclidean distance."""
    return chordal(p, q)


def riemannian_gradient(M, f, p, tol=ON_MANIFOLD_TOL):
    """Tangential part of the ambient gradient of f at p."""
    p = np.asarray(p, dtype=float)
    M.check_point(p, tol)
    return M.tangent_projector(p) @ f.ambient_gradient(p)


def tangent_basis(M, p):
    """Orthonormal basis (columns) of T_pM from the tangent projector."""
    proj = M.tangent_projector(p)
    w, v = np.linalg.eigh(0.5 * (proj + proj.T))
    order = np.argsort(-w)
    return v[:, order[: M.intrinsic_dim]]


def tangent_hessian(M, f, p, basis=None, crit_tol=CRITICAL_TOL, rel_step=HESS_STEP):
    """Second derivative of f along retracted tangent lines at a critical point.

    Entries come from the four-point polarization stencil
    ``[f(p+hv+hw) - f(p+hv-hw) - f(p-hv+hw) + f(p-hv-hw)] / 4h^2`` with every
    probe point retracted onto M.  ``basis`` (orthonormal columns) defaults to
    ``tangent_basis(M, p)``.
    """
    p = np.asarray(p, dtype=float)
    grad = riemannian_gradient(M, f, p)
    if np.linalg.norm(grad) > crit_tol:
        raise DomainError(f"not a critical point (|grad f| = {np.linalg.norm(grad):.3e})")
    if basis is None:
        basis = tangent_basis(M, p)
    h = rel_step * (1.0 + np.linalg.norm(p))
    k = basis.shape[1]

    def val(q):
        return f(M.retract(q))

    H = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            vi = h * basis[:, i]
            vj = h * basis[:, j]
            H[i, j] = (val(p + vi + vj) - val(p + vi - vj) - val(p - vi + vj) + val(p - vi - vj)) / (
                4.0 * h * h
            )
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def kernel_tol(mat):
    """Rank threshold: relative 1e-6 of the top singular value, floored at 1e-6."""
    s = np.linalg.svd(np.atleast_2d(mat), compute_uv=False)
    top = float(s[0]) if s.size else 0.0
    return max(KERNEL_REL * top, KERNEL_FLOOR)


def kernel_dimension(mat, tol=None):
    mat = np.atleast_2d(mat)
    if mat.size == 0:
        return 0
    s = np.linalg.svd(mat, compute_uv=False)
    if tol is None:
        tol = kernel_tol(mat)
    return int(np.sum(s < tol)) + (mat.shape[1] - s.size)
