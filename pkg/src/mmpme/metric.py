"""Metric tensors built from a piecewise-linear solution.

Metric fields are stored as ``(N_v, 2, 2)`` arrays of symmetric positive
definite matrices.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh

log = logging.getLogger(__name__)

METRIC_TYPES = ("uniform", "arclength", "hessian")


@dataclass
class RecoveredDerivatives:
    gradient: np.ndarray  # (N_v, 2)
    hessian: np.ndarray  # (N_v, 2, 2), symmetric
    n_fallback: int = 0  # vertices whose fit stayed rank deficient


def sym(a, b, c) -> np.ndarray:
    """Stack entries into exactly symmetric matrices [[a, b], [b, c]]."""
    a, b, c = np.broadcast_arrays(a, b, c)
    out = np.empty(a.shape + (2, 2))
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 0] = b
    out[..., 1, 1] = c
    return out


def det2(m: np.ndarray) -> np.ndarray:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def inv2(m: np.ndarray) -> np.ndarray:
    d = det2(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1] / d
    out[..., 0, 1] = -m[..., 0, 1] / d
    out[..., 1, 0] = -m[..., 1, 0] / d
    out[..., 1, 1] = m[..., 0, 0] / d
    return out


def eigh2(m: np.ndarray):
    """Closed-form eigen-decomposition of symmetric 2x2 matrices.

    Returns ``(lam, Q)`` with ``lam[..., 0] >= lam[..., 1]`` and the
    eigenvectors in the columns of ``Q``.  Coincident eigenvalues give Q = I.
    """
    a, b, c = m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]
    mean = 0.5 * (a + c)
    r = np.hypot(0.5 * (a - c), b)
    lam = np.stack([mean + r, mean - r], axis=-1)
    # direction of the leading eigenvector: angle phi with tan(2 phi) = 2b/(a-c)
    phi = 0.5 * np.arctan2(2.0 * b, a - c)
    degenerate = r <= 1e-14 * np.maximum(np.abs(mean), 1e-300)
    phi = np.where(degenerate, 0.0, phi)
    cs, sn = np.cos(phi), np.sin(phi)
    q = np.empty(m.shape)
    q[..., 0, 0] = cs
    q[..., 1, 0] = sn
    q[..., 0, 1] = -sn
    q[..., 1, 1] = cs
    return lam, q


def recompose(lam: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Q diag(lam) Q^T, exactly symmetric."""
    q0, q1 = q[..., :, 0], q[..., :, 1]
    l0, l1 = lam[..., 0], lam[..., 1]
    a = l0 * q0[..., 0] ** 2 + l1 * q1[..., 0] ** 2
    b = l0 * q0[..., 0] * q0[..., 1] + l1 * q1[..., 0] * q1[..., 1]
    c = l0 * q0[..., 1] ** 2 + l1 * q1[..., 1] ** 2
    return sym(a, b, c)


def abs_sym(m: np.ndarray) -> np.ndarray:
    """Spectral absolute value |H| = Q diag(|lam|) Q^T of symmetric 2x2 matrices.

    With H = s I + D (s = trace/2, D traceless, r = |eigenvalue of D|) this is
    |s| I + sign(s) D when both eigenvalues share a sign and r I + (s/r) D
    otherwise.  Both forms are exactly invariant under H -> -H.
    """
    a, b, c = m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1]
    s = 0.5 * (a + c)
    da = 0.5 * (a - c)
    r = np.hypot(da, b)
    same = np.abs(s) >= r
    with np.errstate(invalid="ignore", divide="ignore"):
        k = np.where(same, np.sign(s), s / np.where(same, 1.0, r))
    diag = np.where(same, np.abs(s), r)
    return sym(diag + k * da, k * b, diag - k * da)


def _patch_pairs(adj: sp.csr_matrix):
    adj = adj.tocsr()
    rows = np.repeat(np.arange(adj.shape[0]), np.diff(adj.indptr))
    return rows, adj.indices


def _quadratic_fit(mesh: Mesh, u: np.ndarray, patches: sp.csr_matrix, which: np.ndarray):
    """Least-squares quadratic fits at vertices ``which`` over their patches.

    Coordinates are centred on the fitting vertex and scaled by the patch
    radius; the fit is invariant under this affine change of variables.
    Returns (gradient, hessian, ok) for the selected vertices.
    """
    sub = patches[which]
    rows, cols = _patch_pairs(sub)
    x = mesh.vertices
    d = x[cols] - x[which][rows]
    scale = np.maximum.reduceat(np.abs(d).max(axis=1), sub.indptr[:-1])
    scale[scale == 0] = 1.0
    d = d / scale[rows, None]
    dx, dy = d[:, 0], d[:, 1]
    phi = np.column_stack([np.ones_like(dx), dx, dy, dx * dx, dx * dy, dy * dy])
    nw = len(which)
    # every patch contains its own vertex, so CSR row segments are nonempty
    starts = sub.indptr[:-1]
    A = np.add.reduceat(phi[:, :, None] * phi[:, None, :], starts, axis=0)
    rhs = np.add.reduceat(phi * u[cols][:, None], starts, axis=0)
    # rank check on the (dimensionless) normal matrix
    ev = np.linalg.eigvalsh(A)
    ok = ev[:, 0] > 1e-10 * np.maximum(ev[:, -1], 1e-300)
    coef = np.zeros((nw, 6))
    if ok.any():
        coef[ok] = np.linalg.solve(A[ok], rhs[ok][..., None])[..., 0]
    grad = coef[:, 1:3] / scale[:, None]
    s2 = scale**2
    hess = sym(2 * coef[:, 3] / s2, coef[:, 4] / s2, 2 * coef[:, 5] / s2)
    return grad, hess, ok


def recover_hessian(mesh: Mesh, u) -> RecoveredDerivatives:
    """Gradient and Hessian at every vertex by local quadratic least squares.

    The fit at vertex j uses all vertices within graph distance 2 of j, widened
    to distance 3 where that patch cannot determine a quadratic.  Vertices whose
    fit is still rank deficient get a zero Hessian (and zero gradient); their
    count is reported as ``n_fallback``.
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise ValueError("u must hold one value per vertex")
    adj = mesh.topology.adjacency.astype(np.int32)
    p2 = (adj @ adj).astype(bool).tocsr()
    everyone = np.arange(mesh.n_vertices)
    grad, hess, ok = _quadratic_fit(mesh, u, p2, everyone)
    bad = np.flatnonzero(~ok)
    n_fallback = 0
    if len(bad):
        p3 = (p2.astype(np.int32) @ adj).astype(bool).tocsr()
        g3, h3, ok3 = _quadratic_fit(mesh, u, p3, bad)
        grad[bad], hess[bad] = g3, h3
        n_fallback = int((~ok3).sum())
        if n_fallback:
            log.warning("Hessian recovery fell back to zero at %d vertices", n_fallback)
    return RecoveredDerivatives(grad, hess, n_fallback)


def metric_uniform(n_vertices: int) -> np.ndarray:
    return np.broadcast_to(np.eye(2), (n_vertices, 2, 2)).copy()


def metric_arclength(derivs: RecoveredDerivatives) -> np.ndarray:
    """M = (I + grad u grad u^T)^(1/2).

    The square root is taken through the eigen-structure: grad u is an
    eigenvector with eigenvalue sqrt(1 + |grad u|^2), its normal has eigenvalue 1.
    """
    g = np.asarray(derivs.gradient)
    s = np.einsum("ni,ni->n", g, g)
    # (sqrt(1+s) - 1)/s written without cancellation
    coef = 1.0 / (np.sqrt(1.0 + s) + 1.0)
    return sym(1.0 + coef * g[:, 0] ** 2, coef * g[:, 0] * g[:, 1], 1.0 + coef * g[:, 1] ** 2)


def metric_hessian(derivs: RecoveredDerivatives) -> np.ndarray:
    """M = det(I + |H|)^(-1/6) (I + |H|).

    The exponent -1/6 is the two-dimensional instance for the L2 norm of the
    linear interpolation error; it is not valid in other dimensions or norms.
    """
    m = abs_sym(np.asarray(derivs.hessian)) + np.eye(2)
    return det2(m)[:, None, None] ** (-1.0 / 6.0) * m


def element_averages(mesh: Mesh, M: np.ndarray) -> np.ndarray:
    """M_K for every element: arithmetic mean of the vertex matrices."""
    return M[mesh.elements].mean(axis=1)


def element_average(mesh: Mesh, M: np.ndarray, k: int) -> np.ndarray:
    return M[mesh.elements[k]].mean(axis=0)


def smooth_metric(mesh: Mesh, M: np.ndarray, passes: int = 2) -> np.ndarray:
    """Replace each vertex matrix by the mean over its closed neighbourhood, ``passes`` times."""
    if passes < 0:
        raise ValueError("passes must be nonnegative")
    M = np.array(M, dtype=float)
    if passes == 0:
        return M
    adj = mesh.topology.adjacency.astype(float)
    avg = sp.diags(1.0 / np.asarray(adj.sum(axis=1)).ravel()) @ adj
    flat = np.column_stack([M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]])
    for _ in range(passes):
        flat = avg @ flat
    return sym(flat[:, 0], flat[:, 1], flat[:, 2])


def build_metric(mesh: Mesh, u, kind: str, smoothing: int = 2) -> np.ndarray:
    """Metric field of type ``kind`` for nodal solution ``u`` on ``mesh``."""
    if kind == "uniform":
        return metric_uniform(mesh.n_vertices)
    derivs = recover_hessian(mesh, u)
    if kind == "arclength":
        M = metric_arclength(derivs)
    elif kind == "hessian":
        M = metric_hessian(derivs)
    else:
        raise ValueError(f"unknown metric type {kind!r}; expected one of {METRIC_TYPES}")
    return smooth_metric(mesh, M, smoothing)
