"""Two-point finite volume meshes and their discrete calculus.

Cells are numbered ``0..n_cells-1``. Edges share a single numbering: interior
edges come first (``0..n_interior-1``), followed by boundary edges. Every
interior edge stores an ordered pair ``(K, L)``; ``K`` is its owner and signed
edge quantities are given as seen from ``K`` unless a viewing cell is passed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

ORTHOGONALITY_TOL = 1e-10


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh:
    """Admissible mesh: cells, interior and boundary faces, and centers.

    Attributes
    ----------
    centers : (n_cells, d) array
        Cell centers ``x_K``.
    measures : (n_cells,) array
        Cell measures ``m_K``.
    edge_cells : (n_interior, 2) int array
        Ordered cell pair ``(K, L)`` of each interior edge.
    edge_measures, edge_distances : (n_interior,) arrays
        Face measure ``m_sigma`` and center distance ``d_sigma = |x_K - x_L|``.
    boundary_cells : (n_boundary,) int array
        Owner cell of each boundary face.
    boundary_measures, boundary_distances : (n_boundary,) arrays
        Face measure and distance ``|x_K - x_sigma|`` to the face center.
    """

    centers: np.ndarray
    measures: np.ndarray
    edge_cells: np.ndarray
    edge_measures: np.ndarray
    edge_distances: np.ndarray
    boundary_cells: np.ndarray
    boundary_measures: np.ndarray
    boundary_distances: np.ndarray
    adjacency: tuple = field(repr=False)

    @classmethod
    def from_arrays(
        cls,
        centers,
        measures,
        edge_cells,
        edge_measures,
        boundary_cells=(),
        boundary_measures=(),
        boundary_distances=(),
        face_normals=None,
    ) -> "Mesh":
        """Validate raw arrays and build a mesh.

        ``face_normals`` (one unit normal per interior face) is optional; when
        given, ``x_L - x_K`` must be parallel to it within 1e-10 (relative).
        """
        centers = np.asarray(centers, dtype=float)
        if centers.ndim == 1:
            centers = centers.reshape(-1, 1)
        measures = np.asarray(measures, dtype=float)
        n_cells = measures.shape[0]
        if centers.shape[0] != n_cells:
            raise MeshError("centers and measures disagree on the number of cells")
        if n_cells == 0 or np.any(measures <= 0):
            raise MeshError("cell measures must be positive")

        edge_cells = np.asarray(edge_cells, dtype=np.intp).reshape(-1, 2)
        edge_measures = np.asarray(edge_measures, dtype=float).reshape(-1)
        if edge_measures.shape[0] != edge_cells.shape[0]:
            raise MeshError("one face measure per interior edge is required")
        if edge_cells.size and (edge_cells.min() < 0 or edge_cells.max() >= n_cells):
            raise MeshError("edge refers to an unknown cell")
        if np.any(edge_cells[:, 0] == edge_cells[:, 1]):
            raise MeshError("an interior edge must join two distinct cells")
        if np.any(edge_measures <= 0):
            raise MeshError("face measures must be positive")

        delta = centers[edge_cells[:, 1]] - centers[edge_cells[:, 0]]
        edge_distances = np.linalg.norm(delta, axis=1)
        if np.any(edge_distances <= 0):
            raise MeshError("adjacent cell centers coincide")
        if face_normals is not None:
            normals = np.asarray(face_normals, dtype=float).reshape(delta.shape)
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
            along = np.sum(delta * normals, axis=1, keepdims=True) * normals
            off = np.linalg.norm(delta - along, axis=1)
            if np.any(off > ORTHOGONALITY_TOL * edge_distances):
                raise MeshError("x_L - x_K is not orthogonal to the shared face")

        boundary_cells = np.asarray(boundary_cells, dtype=np.intp).reshape(-1)
        boundary_measures = np.asarray(boundary_measures, dtype=float).reshape(-1)
        boundary_distances = np.asarray(boundary_distances, dtype=float).reshape(-1)
        if not (boundary_cells.shape == boundary_measures.shape == boundary_distances.shape):
            raise MeshError("boundary arrays must have equal lengths")
        if np.any(boundary_measures <= 0) or np.any(boundary_distances <= 0):
            raise MeshError("boundary faces need positive measure and distance")

        n_int = edge_cells.shape[0]
        incident: list[list[int]] = [[] for _ in range(n_cells)]
        for e, (k, l) in enumerate(edge_cells):
            incident[k].append(e)
            incident[l].append(e)
        for b, k in enumerate(boundary_cells):
            incident[k].append(n_int + b)
        adjacency = tuple(np.array(x, dtype=np.intp) for x in incident)

        for arr in (centers, measures, edge_cells, edge_measures, edge_distances,
                    boundary_cells, boundary_measures, boundary_distances):
            arr.setflags(write=False)
        return cls(centers, measures, edge_cells, edge_measures, edge_distances,
                   boundary_cells, boundary_measures, boundary_distances, adjacency)

    # sizes -----------------------------------------------------------------

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_cells(self) -> int:
        return self.measures.shape[0]

    @property
    def n_interior(self) -> int:
        return self.edge_cells.shape[0]

    @property
    def n_boundary(self) -> int:
        return self.boundary_cells.shape[0]

    @property
    def n_edges(self) -> int:
        return self.n_interior + self.n_boundary

    @property
    def domain_measure(self) -> float:
        return float(np.sum(self.measures))

    @cached_property
    def tau(self) -> np.ndarray:
        """Transmissibilities ``m_sigma / d_sigma`` of the interior edges."""
        out = self.edge_measures / self.edge_distances
        out.flags.writeable = False
        return out

    @property
    def boundary_tau(self) -> np.ndarray:
        return self.boundary_measures / self.boundary_distances

    # discrete calculus -----------------------------------------------------

    def is_interior(self, edge: int) -> bool:
        return 0 <= edge < self.n_interior

    def mirror_value(self, field, cell: int, edge: int) -> float:
        """Value of ``field`` seen from ``cell`` across ``edge``."""
        self._check_incident(cell, edge)
        if not self.is_interior(edge):
            return float(field[cell])
        k, l = self.edge_cells[edge]
        return float(field[l] if cell == k else field[k])

    def jump(self, field, cell: int, edge: int) -> float:
        """Oriented jump ``V_{K sigma} - V_K``; zero on boundary faces."""
        return self.mirror_value(field, cell, edge) - float(field[cell])

    def edge_jumps(self, field) -> np.ndarray:
        """Jumps ``V_L - V_K`` over all interior edges, seen from the owner."""
        field = np.asarray(field)
        return field[..., self.edge_cells[:, 1]] - field[..., self.edge_cells[:, 0]]

    def _check_incident(self, cell: int, edge: int) -> None:
        if not 0 <= cell < self.n_cells:
            raise MeshError(f"unknown cell {cell}")
        if edge not in self.adjacency[cell]:
            raise MeshError(f"edge {edge} is not incident to cell {cell}")

    def difference_matrix(self) -> sp.csr_matrix:
        """Sparse ``(n_interior, n_cells)`` operator mapping V to its edge jumps."""
        e = np.arange(self.n_interior)
        rows = np.concatenate([e, e])
        cols = np.concatenate([self.edge_cells[:, 1], self.edge_cells[:, 0]])
        vals = np.concatenate([np.ones(self.n_interior), -np.ones(self.n_interior)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_interior, self.n_cells))

    @cached_property
    def _divergence_matrix(self) -> sp.csr_matrix:
        # (n_cells, n_interior): +1 at the owner, -1 at the neighbour
        return (-self.difference_matrix().T).tocsr()

    def flux_divergence(self, edge_values) -> np.ndarray:
        """Sum oriented edge values into cells: owner gets +J, neighbour gets -J.

        Works on the trailing axis, so ``(n_species, n_interior)`` input gives
        ``(n_species, n_cells)`` output.
        """
        edge_values = np.asarray(edge_values, dtype=float)
        lead = edge_values.shape[:-1]
        flat = edge_values.reshape(int(np.prod(lead)), self.n_interior)
        out = (self._divergence_matrix @ flat.T).T
        return out.reshape(lead + (self.n_cells,))

    def laplacian_sum(self, field) -> np.ndarray:
        """``sum_{sigma in E_K,int} tau_sigma D_{K sigma} V`` for every cell K."""
        return self.flux_divergence(self.tau * self.edge_jumps(field))

    def laplacian_matrix(self) -> sp.csr_matrix:
        """Sparse matrix of :meth:`laplacian_sum` (symmetric, zero row sums)."""
        d = self.difference_matrix()
        return (-(d.T @ sp.diags(self.tau) @ d)).tocsr()

    def integrate(self, field) -> np.ndarray:
        """``sum_K m_K V_K`` along the trailing axis."""
        return np.asarray(field, dtype=float) @ self.measures


def build_interval_mesh(n_cells: int, length: float = 1.0) -> Mesh:
    """Uniform mesh of ``(0, length)``; faces are points with unit measure."""
    if int(n_cells) != n_cells or n_cells < 1:
        raise MeshError("n_cells must be a positive integer")
    if not length > 0:
        raise MeshError("length must be positive")
    n_cells = int(n_cells)
    h = length / n_cells
    centers = ((np.arange(n_cells) + 0.5) * h).reshape(-1, 1)
    measures = np.full(n_cells, h)
    edges = np.column_stack([np.arange(n_cells - 1), np.arange(1, n_cells)])
    return Mesh.from_arrays(
        centers, measures, edges, np.ones(n_cells - 1),
        boundary_cells=[0, n_cells - 1],
        boundary_measures=[1.0, 1.0],
        boundary_distances=[h / 2, h / 2],
    )


def build_rect_mesh(nx: int, ny: int, lx: float = 1.0, ly: float = 1.0) -> Mesh:
    """Uniform Cartesian mesh of ``(0, lx) x (0, ly)``.

    Cell ``(ix, iy)`` has index ``ix + nx * iy``. Interior edges are listed
    x-faces first, then y-faces.
    """
    for name, val in (("nx", nx), ("ny", ny)):
        if int(val) != val or val < 1:
            raise MeshError(f"{name} must be a positive integer")
    if not (lx > 0 and ly > 0):
        raise MeshError("side lengths must be positive")
    nx, ny = int(nx), int(ny)
    hx, hy = lx / nx, ly / ny
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    idx = ix + nx * iy
    centers = np.column_stack([(ix + 0.5) * hx, (iy + 0.5) * hy])
    measures = np.full(nx * ny, hx * hy)

    xmask = ix < nx - 1
    ymask = iy < ny - 1
    edges = np.concatenate([
        np.column_stack([idx[xmask], idx[xmask] + 1]),
        np.column_stack([idx[ymask], idx[ymask] + nx]),
    ])
    face_measures = np.concatenate([np.full(xmask.sum(), hy), np.full(ymask.sum(), hx)])
    normals = np.concatenate([
        np.tile([1.0, 0.0], (xmask.sum(), 1)),
        np.tile([0.0, 1.0], (ymask.sum(), 1)),
    ])

    left, right = idx[ix == 0], idx[ix == nx - 1]
    bottom, top = idx[iy == 0], idx[iy == ny - 1]
    b_cells = np.concatenate([left, right, bottom, top])
    b_meas = np.concatenate([np.full(ny, hy), np.full(ny, hy), np.full(nx, hx), np.full(nx, hx)])
    b_dist = np.concatenate([np.full(2 * ny, hx / 2), np.full(2 * nx, hy / 2)])
    return Mesh.from_arrays(centers, measures, edges, face_measures,
                            b_cells, b_meas, b_dist, face_normals=normals)


def write_mesh_csv(mesh: Mesh, directory) -> tuple[Path, Path]:
    """Dump ``cells.csv`` (id, center, measure) and ``edges.csv`` (id, a, b, tau)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    coords = ["x", "y", "z"][: mesh.dim]
    cells_path, edges_path = directory / "cells.csv", directory / "edges.csv"
    with cells_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_id", *coords, "measure"])
        for k in range(mesh.n_cells):
            w.writerow([k, *(f"{c:.17g}" for c in mesh.centers[k]), f"{mesh.measures[k]:.17g}"])
    with edges_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["edge_id", "cell_a", "cell_b", "tau"])
        for e, ((k, l), t) in enumerate(zip(mesh.edge_cells, mesh.tau)):
            w.writerow([e, k, l, f"{t:.17g}"])
    return cells_path, edges_path
