"""Legacy ASCII VTK snapshots and CSV tables."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .mesh import Mesh

VTK_TRIANGLE = 5
STEP_LOG_FIELDS = ("step", "t", "dt", "newton_iterations", "min_area")
CONVERGENCE_FIELDS = ("N", "h", "l2l2", "l1l1", "seconds")


def write_vtk(path, mesh: Mesh, u=None, metric=None, vectors: dict | None = None,
              title: str = "mmpme snapshot") -> Path:
    """Write ``mesh`` as an unstructured grid with optional point data.

    ``u`` is stored as scalars named "u"; ``metric`` (N_v, 2, 2) as a
    3-component field (M11, M12, M22) named "metric"; ``vectors`` maps names
    to (N_v, 2) arrays written as 3D vectors with zero z.
    """
    path = Path(path)
    nv, ne = mesh.n_vertices, mesh.n_elements
    lines = ["# vtk DataFile Version 3.0", title.replace("\n", " ")[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.vertices.tolist()]
    lines.append(f"CELLS {ne} {4 * ne}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.elements.tolist()]
    lines.append(f"CELL_TYPES {ne}")
    lines += [str(VTK_TRIANGLE)] * ne
    point_data = []
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape != (nv,):
            raise ValueError("u must have one value per vertex")
        point_data += ["SCALARS u double 1", "LOOKUP_TABLE default"]
        point_data += [repr(v) for v in u.tolist()]
    if metric is not None:
        M = np.asarray(metric, dtype=float)
        point_data += ["SCALARS metric double 3", "LOOKUP_TABLE default"]
        point_data += [f"{a!r} {b!r} {c!r}" for a, b, c in
                       zip(M[:, 0, 0].tolist(), M[:, 0, 1].tolist(), M[:, 1, 1].tolist())]
    for name, v in (vectors or {}).items():
        v = np.asarray(v, dtype=float)
        point_data.append(f"VECTORS {name} double")
        point_data += [f"{a!r} {b!r} 0.0" for a, b in v.tolist()]
    if point_data:
        lines.append(f"POINT_DATA {nv}")
        lines += point_data
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path):
    """Read a file written by :func:`write_vtk`.

    Returns ``(vertices (N_v, 2), elements (N, 3), point_data dict)``.
    """
    tokens = Path(path).read_text().split("\n")
    it = iter(tokens[4:])
    vertices = elements = None
    data = {}
    for line in it:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "POINTS":
            n = int(parts[1])
            vertices = np.array([next(it).split()[:2] for _ in range(n)], dtype=float)
        elif key == "CELLS":
            n = int(parts[1])
            cells = [next(it).split() for _ in range(n)]
            if any(c[0] != "3" for c in cells):
                raise ValueError("only triangles are supported")
            elements = np.array([c[1:] for c in cells], dtype=np.int64)
        elif key == "CELL_TYPES":
            types = [int(next(it)) for _ in range(int(parts[1]))]
            if any(t != VTK_TRIANGLE for t in types):
                raise ValueError("unexpected cell type")
        elif key == "SCALARS":
            name, ncomp = parts[1], int(parts[3]) if len(parts) > 3 else 1
            next(it)  # LOOKUP_TABLE
            vals = np.array([next(it).split() for _ in range(len(vertices))], dtype=float)
            data[name] = vals[:, 0] if ncomp == 1 else vals
        elif key == "VECTORS":
            data[parts[1]] = np.array([next(it).split()[:2] for _ in range(len(vertices))], dtype=float)
    if vertices is None or elements is None:
        raise ValueError(f"{path}: missing POINTS or CELLS section")
    return vertices, elements, data


def write_rows(path, header: Iterable[str], rows: Iterable[Iterable]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header))
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def write_step_log(path, steps) -> Path:
    """CSV with one line per accepted step: step, t, dt, Newton iterations, min element area."""
    return write_rows(path, STEP_LOG_FIELDS + ("error_norm", "rejected"),
                      ((i + 1, s.t, s.dt, s.newton_iterations, s.min_area, s.error_norm, s.rejected)
                       for i, s in enumerate(steps)))


def write_convergence(path, report) -> Path:
    return write_rows(path, CONVERGENCE_FIELDS,
                      ((r.N, r.h, r.l2l2, r.l1l1, r.seconds) for r in report.rows))


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
