"""Experiment configuration, named presets, and initial data.

Configurations serialize to a flat INI file. Every float is written with
``repr`` so that reading a file back gives bit-identical values. Schema::

    [run]      name, t_end, snapshots, reference (constant | final), output_dir
    [mesh]     cells (space separated), lengths (space separated)
    [model]    epsilon, beta, k_ij for every pair i < j
    [initial]  kind (cosine | random | constant | file), base, kappa,
               frequency, seed, path
    [solver]   newton_tol, newton_max_iter, dt_max, dt_min, dt_grow, dt_shrink
    [stability] c_p, c_sob

Text after ``;`` on a line is a comment.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .mesh import Mesh, build_interval_mesh, build_rect_mesh
from .model import ModelParams, three_species_coeffs
from .scheme import SolverConfig
from .state import State

INITIAL_KINDS = ("cosine", "random", "constant", "file")
REFERENCE_KINDS = ("constant", "final")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MeshSpec:
    cells: tuple
    lengths: tuple

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(int(c) for c in self.cells))
        object.__setattr__(self, "lengths", tuple(float(x) for x in self.lengths))
        if len(self.cells) not in (1, 2) or len(self.lengths) != len(self.cells):
            raise ConfigError("mesh needs one or two cell counts with matching lengths")
        if min(self.cells) < 1 or min(self.lengths) <= 0:
            raise ConfigError("cell counts and lengths must be positive")

    @property
    def dim(self) -> int:
        return len(self.cells)

    @property
    def domain_measure(self) -> float:
        return float(np.prod(self.lengths))

    def build(self) -> Mesh:
        if self.dim == 1:
            return build_interval_mesh(self.cells[0], self.lengths[0])
        return build_rect_mesh(self.cells[0], self.cells[1], self.lengths[0], self.lengths[1])


@dataclass(frozen=True)
class InitialSpec:
    """Initial fractions of species ``0..n-1``; the last one is the complement.

    ``cosine``: ``u_i = base_i (1 + kappa cos(frequency pi x / L))`` along the
    first coordinate. ``random``: ``u_i = base_i + 2 kappa (eta_i - 1/2)`` with
    ``eta`` uniform on [0, 1) from a PCG64 stream; all cells of species 0 are
    drawn first, then all cells of species 1, and so on. ``constant``:
    ``u_i = base_i``. ``file``: the ``u_*`` columns of a snapshot CSV.
    """

    kind: str = "cosine"
    base: tuple = (0.25, 0.25)
    kappa: float = 1.0
    frequency: int = 1
    seed: Optional[int] = None
    path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(float(b) for b in self.base))
        if self.kind not in INITIAL_KINDS:
            raise ConfigError(f"unknown initial kind {self.kind!r}; expected one of {INITIAL_KINDS}")
        if self.kind == "file" and not self.path:
            raise ConfigError("initial kind 'file' needs a path")
        if self.kind != "file" and not self.base:
            raise ConfigError("initial data needs at least one base fraction")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    mesh: MeshSpec
    epsilon: float
    beta: float
    coeffs: tuple
    initial: InitialSpec
    solver: SolverConfig = field(default_factory=SolverConfig)
    t_end: float = 1.0
    snapshots: tuple = ()
    c_p: float = 1.0
    c_sob: float = 1.0
    reference: str = "constant"
    output_dir: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "snapshots", tuple(float(t) for t in self.snapshots))
        object.__setattr__(self, "coeffs", tuple(tuple(float(v) for v in row) for row in self.coeffs))
        if self.reference not in REFERENCE_KINDS:
            raise ConfigError(f"reference must be one of {REFERENCE_KINDS}")
        if self.t_end < 0:
            raise ConfigError("t_end must be nonnegative")
        if self.c_p <= 0 or self.c_sob <= 0:
            raise ConfigError("c_p and c_sob must be positive")
        n = len(self.coeffs)
        if self.initial.kind != "file" and len(self.initial.base) != n - 1:
            raise ConfigError(f"{n} species need {n - 1} base fractions")
        self.params()  # validates the coefficient matrix

    @property
    def n_species(self) -> int:
        return len(self.coeffs)

    def params(self) -> ModelParams:
        try:
            return ModelParams(self.epsilon, self.beta, self.coeffs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# presets ---------------------------------------------------------------------

_COEFFS = three_species_coeffs(k01=0.2, k02=1.0, k12=0.1)


def _one_d(name, epsilon, beta, frequency, t_end):
    return ExperimentConfig(
        name=name, mesh=MeshSpec((100,), (1.0,)), epsilon=epsilon, beta=beta, coeffs=_COEFFS,
        initial=InitialSpec("cosine", (0.25, 0.25), kappa=1.0, frequency=frequency),
        solver=SolverConfig(dt_max=1e-3), t_end=t_end,
        reference="constant" if name in ("stable-1d", "weak-1d") else "final",
    )


def _spinodal(name, n):
    return ExperimentConfig(
        name=name, mesh=MeshSpec((n, n), (1.0, 1.0)), epsilon=1e-3, beta=5.0, coeffs=_COEFFS,
        initial=InitialSpec("random", (0.5, 0.4), kappa=1e-2, seed=20240501),
        solver=SolverConfig(dt_max=5e-3), t_end=1.5,
        snapshots=(0.0, 0.06, 0.13, 0.49, 1.5), reference="final",
    )


PRESETS = {
    "stable-1d": lambda: _one_d("stable-1d", 4.0, 1.0, 1, 10.0),
    "weak-1d": lambda: _one_d("weak-1d", 0.5, 2.0, 1, 10.0),
    "nonconvex-1d-k1": lambda: _one_d("nonconvex-1d-k1", 0.1, 10.0, 1, 8.0),
    "nonconvex-1d-k2": lambda: _one_d("nonconvex-1d-k2", 0.1, 10.0, 2, 2.0),
    "spinodal-2d": lambda: _spinodal("spinodal-2d", 150),
    "spinodal-2d-small": lambda: _spinodal("spinodal-2d-small", 64),
}


def preset(name: str) -> ExperimentConfig:
    """Configuration of a named experiment; raises :class:`ConfigError` if unknown."""
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None


# initial data ----------------------------------------------------------------

def build_initial(config: ExperimentConfig, mesh: Mesh) -> State:
    """Deterministic initial state; the last species closes the per-cell sum."""
    spec = config.initial
    if spec.kind == "file":
        from .io import read_snapshot

        _, values = read_snapshot(spec.path)
        if values.shape != (config.n_species, mesh.n_cells):
            raise ConfigError(f"{spec.path}: expected {config.n_species} species on "
                              f"{mesh.n_cells} cells, found {values.shape}")
        head = values[:-1]
    else:
        base = np.array(spec.base)[:, None]
        if spec.kind == "constant":
            head = np.repeat(base, mesh.n_cells, axis=1)
        elif spec.kind == "cosine":
            x = mesh.centers[:, 0] / config.mesh.lengths[0]
            head = base * (1 + spec.kappa * np.cos(spec.frequency * np.pi * x))[None, :]
        else:
            if spec.seed is None:
                raise ConfigError("random initial data needs a seed")
            rng = np.random.Generator(np.random.PCG64(spec.seed))
            eta = rng.random((len(spec.base), mesh.n_cells))
            head = base + 2 * spec.kappa * (eta - 0.5)
    values = np.vstack([head, 1.0 - head.sum(axis=0)])
    if np.any(values < 0) or np.any(values > 1):
        raise ConfigError("initial data leaves [0, 1]")
    return State(values)


# INI round trip ----------------------------------------------------------------

def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def to_ini(config: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {
        "name": config.name,
        "t_end": repr(config.t_end),
        "snapshots": " ".join(repr(t) for t in config.snapshots),
        "reference": config.reference,
        "output_dir": config.output_dir or "",
    }
    cp["mesh"] = {
        "cells": " ".join(str(c) for c in config.mesh.cells),
        "lengths": " ".join(repr(x) for x in config.mesh.lengths),
    }
    model = {"epsilon": repr(config.epsilon), "beta": repr(config.beta)}
    n = config.n_species
    for i in range(n):
        for j in range(i + 1, n):
            model[f"k_{i}{j}"] = repr(config.coeffs[i][j])
    cp["model"] = model
    init = config.initial
    cp["initial"] = {
        "kind": init.kind,
        "base": " ".join(repr(b) for b in init.base),
        "kappa": repr(init.kappa),
        "frequency": str(init.frequency),
        "seed": "" if init.seed is None else str(init.seed),
        "path": init.path or "",
    }
    s = config.solver
    cp["solver"] = {
        "newton_tol": repr(s.newton_tol), "newton_max_iter": str(s.newton_max_iter),
        "dt_max": repr(s.dt_max), "dt_min": repr(s.dt_min),
        "dt_grow": repr(s.dt_grow), "dt_shrink": repr(s.dt_shrink),
    }
    cp["stability"] = {"c_p": repr(config.c_p), "c_sob": repr(config.c_sob)}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def from_ini(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    try:
        cp.read_string(text)
        run, mesh, model = cp["run"], cp["mesh"], cp["model"]
        init, solver, stab = cp["initial"], cp["solver"], cp["stability"]
        cells = tuple(int(c) for c in mesh["cells"].split())
        n = 1 + max(int(k[3]) for k in model if k.startswith("k_"))
        coeffs = [[0.0] * n for _ in range(n)]
        for i in range(n):
            for j in range(i + 1, n):
                coeffs[i][j] = coeffs[j][i] = model.getfloat(f"k_{i}{j}")
        return ExperimentConfig(
            name=run["name"],
            mesh=MeshSpec(cells, _floats(mesh["lengths"])),
            epsilon=model.getfloat("epsilon"),
            beta=model.getfloat("beta"),
            coeffs=coeffs,
            initial=InitialSpec(
                kind=init["kind"], base=_floats(init.get("base", "")),
                kappa=init.getfloat("kappa"), frequency=init.getint("frequency"),
                seed=int(init["seed"]) if init.get("seed") else None,
                path=init.get("path") or None,
            ),
            solver=SolverConfig(
                newton_tol=solver.getfloat("newton_tol"),
                newton_max_iter=solver.getint("newton_max_iter"),
                dt_max=solver.getfloat("dt_max"), dt_min=solver.getfloat("dt_min"),
                dt_grow=solver.getfloat("dt_grow"), dt_shrink=solver.getfloat("dt_shrink"),
            ),
            t_end=run.getfloat("t_end"),
            snapshots=_floats(run.get("snapshots", "")),
            reference=run.get("reference", "constant"),
            output_dir=run.get("output_dir") or None,
            c_p=stab.getfloat("c_p"),
            c_sob=stab.getfloat("c_sob"),
        )
    except (configparser.Error, KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    return from_ini(Path(path).read_text())


def save_config(config: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(to_ini(config))
    return path


def with_overrides(config: ExperimentConfig, *, seed=None, t_end=None, snapshots=None,
                   output_dir=None) -> ExperimentConfig:
    """Copy of ``config`` with the command-line overrides applied."""
    changes = {}
    if seed is not None:
        changes["initial"] = replace(config.initial, seed=int(seed))
    if t_end is not None:
        changes["t_end"] = float(t_end)
    if snapshots is not None:
        changes["snapshots"] = tuple(snapshots)
    if output_dir is not None:
        changes["output_dir"] = str(output_dir)
    return replace(config, **changes) if changes else config
