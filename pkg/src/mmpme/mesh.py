"""Triangular meshes on axis-aligned rectangles.

A :class:`Mesh` carries vertex coordinates, a counterclockwise element table and
per-vertex boundary tags.  Meshes that differ only in vertex positions (the
physical, computational and reference meshes of the moving-mesh method) share a
single :class:`Topology`, so connectivity queries are computed once.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

INTERIOR = -1
CORNER = -2

# boundary segment ids
BOTTOM, RIGHT, TOP, LEFT = 0, 1, 2, 3

BARY_TOL = 1e-9


class MeshError(Exception):
    """Base class for mesh failures."""


class PointOutsideMeshError(MeshError):
    """A query point is not covered by any element."""


class InvalidHintError(MeshError, IndexError):
    """A location hint does not name an element of the mesh."""


@dataclass(frozen=True)
class Rectangle:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ValueError(f"degenerate rectangle {self}")

    @classmethod
    def square(cls, a: float, b: float) -> "Rectangle":
        return cls(a, b, a, b)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.xmax - self.xmin, self.ymax - self.ymin))

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)])

    def segment_tangent(self, segment: int) -> np.ndarray:
        return np.array([1.0, 0.0]) if segment in (BOTTOM, TOP) else np.array([0.0, 1.0])

    def distance_to_segment(self, points: np.ndarray, segments: np.ndarray) -> np.ndarray:
        """Distance from each point to the line carrying its boundary segment."""
        points = np.atleast_2d(points)
        level = np.array([self.ymin, self.xmax, self.ymax, self.xmin])[segments]
        coord = np.where(np.isin(segments, (BOTTOM, TOP)), points[:, 1], points[:, 0])
        return np.abs(coord - level)


class Topology:
    """Connectivity shared by all meshes with the same element table."""

    def __init__(self, elements: np.ndarray, n_vertices: int, boundary_tags: np.ndarray):
        self.elements = elements
        self.n_vertices = n_vertices
        self.boundary_tags = boundary_tags

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def interior(self) -> np.ndarray:
        """Indices of interior vertices, in increasing order."""
        return np.flatnonzero(self.boundary_tags == INTERIOR)

    @cached_property
    def corners(self) -> np.ndarray:
        return np.flatnonzero(self.boundary_tags == CORNER)

    @cached_property
    def vertex_elements(self) -> sp.csr_matrix:
        """Vertex-by-element incidence; row j lists the patch of vertex j."""
        n = self.n_elements
        rows = self.elements.ravel()
        cols = np.repeat(np.arange(n), 3)
        data = np.tile(np.arange(3, dtype=np.int8) + 1, n)  # local index + 1
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_vertices, n))

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Boolean vertex adjacency including the diagonal."""
        inc = self.vertex_elements.astype(bool).astype(np.int32)
        adj = (inc @ inc.T).astype(bool)
        return adj.tocsr()

    @cached_property
    def vertex_hint(self) -> np.ndarray:
        """One incident element per vertex."""
        ve = self.vertex_elements
        return ve.indices[ve.indptr[:-1]]

    @cached_property
    def neighbors(self) -> np.ndarray:
        """``neighbors[k, i]`` is the element across the edge opposite local vertex i (-1 on the boundary)."""
        el = self.elements
        n = len(el)
        opposite = np.stack([el[:, [1, 2]], el[:, [2, 0]], el[:, [0, 1]]], axis=1).reshape(-1, 2)
        opposite.sort(axis=1)
        key = opposite[:, 0].astype(np.int64) * self.n_vertices + opposite[:, 1]
        order = np.argsort(key, kind="stable")
        sk = key[order]
        out = np.full(3 * n, -1, dtype=np.int64)
        same = np.flatnonzero(sk[1:] == sk[:-1])
        a, b = order[same], order[same + 1]
        out[a] = b // 3
        out[b] = a // 3
        return out.reshape(n, 3)


class Mesh:
    """A conforming triangulation with counterclockwise elements.

    Parameters
    ----------
    vertices : (N_v, 2) array
    elements : (N, 3) integer array
    boundary_tags : (N_v,) integer array
        ``INTERIOR``, ``CORNER`` or the id of the boundary segment the vertex lies on.
    domain : Rectangle
    """

    def __init__(self, vertices, elements=None, boundary_tags=None, domain=None, *, topology=None):
        vertices = np.array(vertices, dtype=float)
        vertices.setflags(write=False)
        if topology is None:
            elements = np.asarray(elements, dtype=np.int64)
            boundary_tags = np.asarray(boundary_tags, dtype=np.int64)
            if elements.ndim != 2 or elements.shape[1] != 3:
                raise ValueError("elements must be an (N, 3) array")
            if elements.min() < 0 or elements.max() >= len(vertices):
                raise ValueError("element vertex index out of range")
            topology = Topology(elements, len(vertices), boundary_tags)
        elif len(vertices) != topology.n_vertices:
            raise ValueError("vertex count does not match topology")
        self.vertices = vertices
        self.topology = topology
        self.domain = domain

    def moved(self, vertices) -> "Mesh":
        """Same connectivity, new vertex positions."""
        return Mesh(vertices, domain=self.domain, topology=self.topology)

    @property
    def elements(self) -> np.ndarray:
        return self.topology.elements

    @property
    def boundary_tags(self) -> np.ndarray:
        return self.topology.boundary_tags

    @property
    def n_vertices(self) -> int:
        return self.topology.n_vertices

    @property
    def n_elements(self) -> int:
        return self.topology.n_elements

    def shares_connectivity(self, other: "Mesh") -> bool:
        return self.topology is other.topology or (
            self.n_vertices == other.n_vertices and np.array_equal(self.elements, other.elements)
        )

    @cached_property
    def edge_matrices(self) -> np.ndarray:
        """(N, 2, 2) array whose k-th entry is E_K = [x1 - x0, x2 - x0]."""
        x = self.vertices[self.elements]
        return np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=-1)

    @cached_property
    def dets(self) -> np.ndarray:
        e = self.edge_matrices
        return e[:, 0, 0] * e[:, 1, 1] - e[:, 0, 1] * e[:, 1, 0]

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * self.dets

    @cached_property
    def inverse_edge_matrices(self) -> np.ndarray:
        e = self.edge_matrices
        d = self.dets
        inv = np.empty_like(e)
        inv[:, 0, 0] = e[:, 1, 1] / d
        inv[:, 0, 1] = -e[:, 0, 1] / d
        inv[:, 1, 0] = -e[:, 1, 0] / d
        inv[:, 1, 1] = e[:, 0, 0] / d
        return inv

    def is_valid(self) -> bool:
        return bool(np.all(self.dets > 0))

    def edge_matrix(self, k: int) -> np.ndarray:
        return self.edge_matrices[k].copy()

    def boundary_deviation(self) -> float:
        """Largest distance of a boundary vertex from its tagged segment (corners from their corner)."""
        tags = self.boundary_tags
        seg = np.flatnonzero(tags >= 0)
        dev = 0.0
        if len(seg):
            dev = float(self.domain.distance_to_segment(self.vertices[seg], tags[seg]).max())
        cx = self.vertices[self.topology.corners]
        if len(cx):
            d = self.domain
            gx = np.minimum(np.abs(cx[:, 0] - d.xmin), np.abs(cx[:, 0] - d.xmax))
            gy = np.minimum(np.abs(cx[:, 1] - d.ymin), np.abs(cx[:, 1] - d.ymax))
            dev = max(dev, float(np.max(np.hypot(gx, gy))))
        return dev


def build_structured_mesh(domain: Rectangle, n: int, pattern: str = "right") -> Mesh:
    """Structured triangulation of a rectangle with ``n`` cells per side.

    ``pattern="right"`` splits every cell along its SW-NE diagonal (2n^2
    elements, (n+1)^2 vertices).  ``pattern="crisscross"`` splits every cell
    into four triangles around an added cell-centre vertex (4n^2 elements).
    """
    if not isinstance(domain, Rectangle):
        domain = Rectangle(*domain)
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    n = int(n)
    xs = np.linspace(domain.xmin, domain.xmax, n + 1)
    ys = np.linspace(domain.ymin, domain.ymax, n + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = [np.column_stack([X.ravel(), Y.ravel()])]
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    a = j * (n + 1) + i
    b, c, d = a + 1, a + n + 2, a + n + 1

    if pattern == "right":
        elements = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
        # interleave so the two halves of a cell are adjacent in the table
        elements = elements.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    elif pattern == "crisscross":
        m = (n + 1) ** 2 + j * n + i
        verts.append(np.column_stack([0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])]))
        elements = np.stack(
            [np.column_stack([a, b, m]), np.column_stack([b, c, m]),
             np.column_stack([c, d, m]), np.column_stack([d, a, m])], axis=1
        ).reshape(-1, 3)
    else:
        raise ValueError(f"unknown mesh pattern {pattern!r}")

    vertices = np.concatenate(verts)
    tags = np.full(len(vertices), INTERIOR, dtype=np.int64)
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1))
    ii, jj = ii.ravel(), jj.ravel()
    grid_tags = tags[: (n + 1) ** 2]
    grid_tags[jj == 0] = BOTTOM
    grid_tags[jj == n] = TOP
    grid_tags[ii == 0] = LEFT
    grid_tags[ii == n] = RIGHT
    grid_tags[((ii == 0) | (ii == n)) & ((jj == 0) | (jj == n))] = CORNER
    return Mesh(vertices, elements, tags, domain)


def barycentric(mesh: Mesh, k: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of ``points[i]`` with respect to element ``k[i]``."""
    x0 = mesh.vertices[mesh.elements[k, 0]]
    l12 = np.einsum("nij,nj->ni", mesh.inverse_edge_matrices[k], points - x0)
    return np.column_stack([1.0 - l12.sum(axis=1), l12])


def locate_points(mesh: Mesh, points, hints=None, tol: float = BARY_TOL):
    """Locate many points at once by walking from ``hints``.

    Returns ``(elements, bary)``.  Points the walk cannot reach fall back to an
    exhaustive scan; points outside every element raise
    :class:`PointOutsideMeshError`.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    npts = len(points)
    if hints is None:
        cur = np.zeros(npts, dtype=np.int64)
    else:
        cur = np.array(np.broadcast_to(hints, (npts,)), dtype=np.int64)
        if np.any((cur < 0) | (cur >= mesh.n_elements)):
            raise InvalidHintError("hint is not a valid element index")
    nbr = mesh.topology.neighbors
    found = np.full(npts, -1, dtype=np.int64)
    bary = np.zeros((npts, 3))
    active = np.arange(npts)
    max_walk = 4 * int(np.sqrt(mesh.n_elements)) + 20
    for _ in range(max_walk):
        if len(active) == 0:
            break
        lam = barycentric(mesh, cur[active], points[active])
        worst = lam.argmin(axis=1)
        inside = lam[np.arange(len(active)), worst] >= -tol
        done = active[inside]
        found[done] = cur[done]
        bary[done] = lam[inside]
        step = active[~inside]
        nxt = nbr[cur[step], worst[~inside]]
        stuck = nxt < 0
        cur[step[~stuck]] = nxt[~stuck]
        # points that walked off the boundary go to the exhaustive scan
        active = step[~stuck]
    rest = np.flatnonzero(found < 0)
    if len(rest):
        allk = np.arange(mesh.n_elements)
        for p in rest:
            lam = barycentric(mesh, allk, np.broadcast_to(points[p], (mesh.n_elements, 2)))
            score = lam.min(axis=1)
            k = int(score.argmax())
            if score[k] < -tol:
                raise PointOutsideMeshError(f"point {points[p]} lies outside the mesh")
            found[p] = k
            bary[p] = lam[k]
    return found, bary


def locate_point(mesh: Mesh, p, hint: int | None = None, tol: float = BARY_TOL):
    """Locate a single point; returns ``(element, bary)``."""
    k, lam = locate_points(mesh, np.asarray(p, dtype=float)[None, :], None if hint is None else [hint], tol)
    return int(k[0]), lam[0]


def eval_pwl(mesh: Mesh, field, points, hints=None):
    """Evaluate the piecewise-linear interpolant of nodal ``field`` at ``points``.

    ``field`` may be scalar per vertex, shape (N_v,), or vector, (N_v, c).
    A single point returns a scalar (or a length-c vector).
    """
    field = np.asarray(field, dtype=float)
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    k, lam = locate_points(mesh, np.atleast_2d(pts), hints)
    vals = field[mesh.elements[k]]
    if field.ndim == 1:
        out = np.einsum("ni,ni->n", lam, vals)
    else:
        out = np.einsum("ni,nic->nc", lam, vals)
    return out[0] if single else out
