"""CSV output of diagnostic series and state snapshots (17 significant digits)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mesh import Mesh
from .state import State

FLOAT_FORMAT = "%.17g"


def _fmt(x) -> str:
    return FLOAT_FORMAT % float(x)


def series_header(n_species: int) -> list:
    return (["step", "time", "dt", "E_total", "E_conv", "E_conc", "dissipation", "RE"]
            + [f"mass_{i}" for i in range(n_species)]
            + ["min_u", "max_u", "el_residual", "newton_iters"])


def series_rows(diagnostics: Iterable, relative_energy: Sequence[float] | None = None):
    """Rows for :func:`series_header`; ``relative_energy`` overrides the RE column."""
    for n, d in enumerate(diagnostics):
        re = d.relative_energy if relative_energy is None else relative_energy[n]
        yield ([str(d.step), _fmt(d.time), _fmt(d.dt), _fmt(d.energy.e_total),
                _fmt(d.energy.e_conv), _fmt(d.energy.e_conc), _fmt(d.dissipation), _fmt(re)]
               + [_fmt(m) for m in d.masses]
               + [_fmt(d.min_u), _fmt(d.max_u), _fmt(d.el_residual), str(d.newton_iters)])


def write_series(path, diagnostics: Sequence, n_species: int,
                 relative_energy: Sequence[float] | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(series_header(n_species))
        writer.writerows(series_rows(diagnostics, relative_energy))
    return path


def read_series(path) -> dict:
    """Columns of a series CSV as float arrays keyed by header name."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(-1, len(header))
    return {name: data[:, j] for j, name in enumerate(header)}


def snapshot_name(time: float) -> str:
    return f"snapshot_t{time:.10g}.csv"


def write_snapshot(path, mesh: Mesh, state: State) -> Path:
    path = Path(path)
    coords = ["x", "y", "z"][: mesh.dim]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id"] + coords + [f"u_{i}" for i in range(state.n_species)])
        for k in range(mesh.n_cells):
            writer.writerow([str(k)] + [_fmt(c) for c in mesh.centers[k]]
                            + [_fmt(v) for v in state.values[:, k]])
    return path


def read_snapshot(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(centers, values)`` with ``values`` shaped ``(n_species, n_cells)``."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if not header or header[0] != "cell_id":
        raise ValueError(f"{path}: not a snapshot file")
    coord_cols = [j for j, h in enumerate(header) if h in ("x", "y", "z")]
    u_cols = [j for j, h in enumerate(header) if h.startswith("u_")]
    order = np.argsort([int(r[0]) for r in rows])
    table = np.array([[float(v) for v in r] for r in rows], dtype=float)[order]
    return table[:, coord_cols], table[:, u_cols].T.copy()
