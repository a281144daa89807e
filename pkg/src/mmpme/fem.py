"""Linear finite elements for the porous medium equation on a moving mesh.

The semi-discrete system is ``B(X) dU/dt = F(U, X, Xdot)`` over the interior
vertices (homogeneous Dirichlet values are eliminated).  ``F`` contains the
mesh-velocity transport term, the nonlinear diffusion ``|u|^m grad u`` with a
constant or space-time dependent exponent, and an optional absorption term
``-lambda |u|^(sigma-1) u``, smoothed near ``u = 0`` as
``-lambda u (u^2 + delta^2)^((sigma-1)/2)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, Topology

# Symmetric 6-point rule, exact for polynomials of degree 4 on triangles.
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
QUAD_BARY = np.array([
    [1 - 2 * _A1, _A1, _A1], [_A1, 1 - 2 * _A1, _A1], [_A1, _A1, 1 - 2 * _A1],
    [1 - 2 * _A2, _A2, _A2], [_A2, 1 - 2 * _A2, _A2], [_A2, _A2, 1 - 2 * _A2],
])
QUAD_W = np.array([_W1] * 3 + [_W2] * 3)

LOCAL_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0  # times |K|

# |u| floor inside powers with a negative exponent
U_FLOOR = 1e-14

Field = Union[float, Callable[[np.ndarray, np.ndarray, float], np.ndarray]]


@dataclass
class ProblemCoefficients:
    """Exponent ``m`` (or a field gamma(x, y, t)), absorption ``lam`` and sigma.

    ``absorption_delta`` smooths the absorption term at ``u = 0``.  For
    ``sigma < 1`` the exact term is non-Lipschitz there and every nodal value
    that dies out forces the step size down; ``1e-4`` changes solutions by
    about that much relative to their peak while cutting step counts several
    fold.
    """

    exponent: Field = 1.0
    lam: float = 0.0
    sigma: Field = 1.0
    absorption_delta: float = 1e-4

    @staticmethod
    def _eval(f, x, y, t):
        if callable(f):
            return np.asarray(f(x, y, t), dtype=float)
        return float(f)

    def exponent_at(self, x, y, t):
        return self._eval(self.exponent, x, y, t)

    def sigma_at(self, x, y, t):
        return self._eval(self.sigma, x, y, t)

    @property
    def variable(self) -> bool:
        return callable(self.exponent) or callable(self.sigma)


class Assembler:
    """Element loops and sparse assembly for one mesh topology."""

    def __init__(self, topology: Topology):
        self.topology = topology
        el = topology.elements
        nv = topology.n_vertices
        self.interior = topology.interior
        self.n_dofs = len(self.interior)
        dof = np.full(nv, -1, dtype=np.int64)
        dof[self.interior] = np.arange(self.n_dofs)
        self.dof = dof
        ldof = dof[el]  # (N, 3)
        rows = np.repeat(ldof, 3, axis=1).ravel()
        cols = np.tile(ldof, (1, 3)).ravel()
        keep = (rows >= 0) & (cols >= 0)
        self._keep = keep
        pattern = sp.csr_matrix(
            (np.ones(keep.sum()), (rows[keep], cols[keep])), shape=(self.n_dofs, self.n_dofs)
        )
        pattern.sum_duplicates()
        pattern.sort_indices()
        self._indptr = pattern.indptr
        self._indices = pattern.indices
        # position of every kept local entry in the CSR data array
        key = rows[keep] * self.n_dofs + cols[keep]
        csr_rows = np.repeat(np.arange(self.n_dofs), np.diff(pattern.indptr))
        csr_key = csr_rows * self.n_dofs + pattern.indices
        self._slot = np.searchsorted(csr_key, key)
        self._nnz = len(csr_key)

    # -- geometry -------------------------------------------------------
    def geometry(self, X):
        """Areas and basis gradients (N, 3, 2) for vertex coordinates X."""
        x = X[self.topology.elements]
        e = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=-1)
        det = e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]
        g = np.empty((len(e), 3, 2))
        # rows of E^-1 are the gradients of the barycentrics 1 and 2
        g[:, 1, 0] = e[:, 1, 1] / det
        g[:, 1, 1] = -e[:, 0, 1] / det
        g[:, 2, 0] = -e[:, 1, 0] / det
        g[:, 2, 1] = e[:, 0, 0] / det
        g[:, 0] = -(g[:, 1] + g[:, 2])
        return 0.5 * det, g, x

    # -- assembly -------------------------------------------------------
    def matrix(self, local) -> sp.csr_matrix:
        data = np.bincount(self._slot, weights=local.reshape(-1)[self._keep], minlength=self._nnz)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=(self.n_dofs, self.n_dofs))

    def vector(self, local) -> np.ndarray:
        full = np.bincount(self.topology.elements.ravel(), weights=local.ravel(),
                           minlength=self.topology.n_vertices)
        return full[self.interior]

    def full(self, U) -> np.ndarray:
        """Nodal vector over all vertices from interior values (boundary = 0)."""
        U = np.asarray(U)
        if U.shape[0] == self.topology.n_vertices:
            out = np.array(U, dtype=float)
            out[self.topology.boundary_tags != -1] = 0.0
            return out
        out = np.zeros(self.topology.n_vertices, dtype=U.dtype)
        out[self.interior] = U
        return out

    def mass_matrix(self, X) -> sp.csr_matrix:
        area, _, _ = self.geometry(X)
        return self.matrix(area[:, None, None] * LOCAL_MASS)

    def stiffness_matrix(self, X) -> sp.csr_matrix:
        area, g, _ = self.geometry(X)
        return self.matrix(area[:, None, None] * np.einsum("nic,njc->nij", g, g))

    def _quad_points(self, x):
        return np.einsum("qi,nic->nqc", QUAD_BARY, x)

    def _element_terms(self, Ufull, X, Xdot, coeffs: ProblemCoefficients, t, want_jac=False):
        area, g, x = self.geometry(X)
        ul = Ufull[self.topology.elements]
        gu = np.einsum("ni,nic->nc", ul, g)
        uq = ul @ QUAD_BARY.T  # (N, 6)
        au = np.abs(uq)
        if coeffs.variable:
            xq = self._quad_points(x)
            m = coeffs.exponent_at(xq[..., 0], xq[..., 1], t)
            sig = coeffs.sigma_at(xq[..., 0], xq[..., 1], t)
        else:
            m, sig = float(coeffs.exponent), float(coeffs.sigma)
        wa = area[:, None] * QUAD_W  # quadrature weights times |K|
        diff = (wa * au**m).sum(axis=1)  # integral of |u|^m over K
        ggu = np.einsum("nc,nic->ni", gu, g)
        F = -diff[:, None] * ggu
        xd = Xdot[self.topology.elements]
        a = (area / 12.0)[:, None, None] * (xd + xd.sum(axis=1, keepdims=True))  # int_K Xdot phi_i
        F += np.einsum("nc,nic->ni", gu, a)
        lam = coeffs.lam
        if lam:
            d2 = max(coeffs.absorption_delta, U_FLOOR) ** 2
            q = uq * uq + d2
            F -= lam * (wa * q ** ((sig - 1.0) / 2) * uq) @ QUAD_BARY
        if not want_jac:
            return F
        Jl = np.einsum("nic,njc->nij", a, g)
        Jl -= diff[:, None, None] * np.einsum("nic,njc->nij", g, g)
        if np.any(m != 0):
            # d|u|^m/du = m |u|^(m-1) sign(u)
            dpow = np.where(au > U_FLOOR, m * np.maximum(au, U_FLOOR) ** (m - 1.0) * np.sign(uq), 0.0)
            Jl -= ggu[:, :, None] * ((wa * dpow) @ QUAD_BARY)[:, None, :]
        if lam:
            # d/du [u q^((sigma-1)/2)] = q^((sigma-3)/2) (sigma u^2 + delta^2)
            ds = q ** ((sig - 3.0) / 2) * (sig * uq * uq + d2)
            Jl -= lam * np.einsum("nq,qi,qj->nij", wa * ds, QUAD_BARY, QUAD_BARY)
        return F, Jl

    def rhs(self, U, X, Xdot, coeffs, t) -> np.ndarray:
        return self.vector(self._element_terms(self.full(U), X, Xdot, coeffs, t))

    def jacobian(self, U, X, Xdot, coeffs, t) -> sp.csr_matrix:
        _, Jl = self._element_terms(self.full(U), X, Xdot, coeffs, t, want_jac=True)
        return self.matrix(Jl)

    def load_vector(self, X, f) -> np.ndarray:
        area, _, x = self.geometry(X)
        xq = self._quad_points(x)
        fq = np.asarray(f(xq[..., 0], xq[..., 1]), dtype=float)
        return self.vector((area[:, None] * QUAD_W * fq) @ QUAD_BARY)

    def error_integrals(self, U, X, exact):
        """(int e^2, int |e|) with e = u_h - exact over the mesh."""
        area, _, x = self.geometry(X)
        ul = self.full(U)[self.topology.elements]
        xq = self._quad_points(x)
        e = ul @ QUAD_BARY.T - np.asarray(exact(xq[..., 0], xq[..., 1]), dtype=float)
        wa = area[:, None] * QUAD_W
        return float((wa * e * e).sum()), float((wa * np.abs(e)).sum())


def assembler_for(mesh: Mesh) -> Assembler:
    topo = mesh.topology
    asm = getattr(topo, "_assembler", None)
    if asm is None:
        asm = Assembler(topo)
        topo._assembler = asm
    return asm


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Mass matrix over interior basis functions."""
    if not mesh.is_valid():
        raise ValueError("mesh has singular or inverted elements")
    return assembler_for(mesh).mass_matrix(mesh.vertices)


def rhs(U, mesh: Mesh, Xdot, coeffs: ProblemCoefficients, t: float = 0.0) -> np.ndarray:
    """F(U, X, Xdot) over interior vertices; ``U`` may be interior-only or full nodal."""
    Xdot = np.zeros((mesh.n_vertices, 2)) if Xdot is None else np.asarray(Xdot, dtype=float)
    return assembler_for(mesh).rhs(U, mesh.vertices, Xdot, coeffs, t)


def project_initial(mesh: Mesh, u0) -> np.ndarray:
    """L2 projection of ``u0(x, y)`` onto the interior basis; returns nodal values on all vertices."""
    asm = assembler_for(mesh)
    B = asm.mass_matrix(mesh.vertices)
    b = asm.load_vector(mesh.vertices, u0)
    return asm.full(spla.spsolve(B.tocsc(), b))


def error_norms(trajectory, exact):
    """Space-time L2(L2) and L1(L1) norms of u_h - exact.

    ``trajectory`` is a sequence of ``(mesh, U, t)`` with nodal ``U``;
    ``exact(x, y, t)``.  Space integrals use the 6-point rule, time integrals the
    composite trapezoid rule over the given nodes.
    """
    acc = ErrorAccumulator(exact)
    for mesh, U, t in trajectory:
        acc.add(mesh, U, t)
    return acc.norms()


class ErrorAccumulator:
    """Running trapezoid-in-time accumulation of space-time error norms."""

    def __init__(self, exact):
        self.exact = exact
        self.t_prev = None
        self.prev = None
        self.sq = 0.0
        self.l1 = 0.0
        self.count = 0

    def add(self, mesh: Mesh, U, t: float):
        e2, e1 = assembler_for(mesh).error_integrals(U, mesh.vertices, lambda x, y: self.exact(x, y, t))
        if self.prev is not None:
            dt = t - self.t_prev
            self.sq += 0.5 * dt * (self.prev[0] + e2)
            self.l1 += 0.5 * dt * (self.prev[1] + e1)
        self.prev, self.t_prev = (e2, e1), t
        self.count += 1

    def norms(self):
        if self.count == 0:
            raise ValueError("empty trajectory")
        return float(np.sqrt(self.sq)), float(self.l1)
