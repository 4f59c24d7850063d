"""Per-step measurements of the discrete structure and simple rate fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mesh import Mesh
from .model import (
    EnergyBreakdown,
    ModelParams,
    chemical_potentials,
    discrete_energy,
    edge_fractions,
    mobility_form,
    relative_energy,
)
from .state import State, as_values
from .stationary import el_residual_field


@dataclass(frozen=True)
class Thresholds:
    mass_drift: float = 1e-9
    volume_filling: float = 1e-9
    energy_slack: float = 1e-10  # relative to 1 + |E_prev|


def dissipation(mesh: Mesh, params: ModelParams, U_next, U_prev) -> float:
    """``sum_sigma tau_sigma (D mu)^T M(U_sigma) (D mu)``; NaN if a value is ``<= 0``."""
    V = as_values(U_next)
    if np.any(V <= 0):
        return float("nan")
    mu = chemical_potentials(mesh, V, U_prev, params)
    Us = edge_fractions(V, mesh)
    return float(np.sum(mesh.tau * mobility_form(mesh.edge_jumps(mu), Us, params)))


def fit_exponential_rate(times, values) -> tuple[float, float]:
    """Least-squares fit of ``ln(values)`` against ``times``.

    Returns ``(rate, r_squared)`` where ``values ~ C exp(-rate t)``. A
    constant series gives rate 0 and r_squared 1.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.size < 3:
        raise ValueError("need at least three (time, value) pairs")
    if np.any(v <= 0):
        raise ValueError("values must be strictly positive")
    y = np.log(v)
    slope, intercept = np.polyfit(t, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - (slope * t + intercept)) ** 2))
    # a spread at round-off level means the series is constant
    flat = ss_tot <= y.size * (1e-13 * max(1.0, float(np.max(np.abs(y))))) ** 2
    r2 = 1.0 if flat else 1.0 - ss_res / ss_tot
    return -float(slope), r2


@dataclass
class StepDiagnostics:
    step: int
    time: float
    dt: float
    energy: EnergyBreakdown
    dissipation: float
    masses: np.ndarray
    min_u: float
    max_u: float
    volume_filling_defect: float
    el_residual: float
    relative_energy: float
    newton_iters: int
    mass_drift: float
    energy_slack: float
    violations: dict = field(default_factory=dict)

    @property
    def e_total(self) -> float:
        return self.energy.e_total

    @property
    def ok(self) -> bool:
        return not self.violations


def check_step(mesh: Mesh, params: ModelParams, prev: Optional[State], next: State,
               dt: float, *, step: int = 0, initial_masses=None,
               reference: Optional[State] = None, newton_iters: int = 0,
               e_prev: Optional[float] = None,
               thresholds: Thresholds = Thresholds()) -> StepDiagnostics:
    """Measure every invariant for the accepted step ``prev -> next``.

    ``prev = None`` describes the initial state (no dissipation, no energy
    inequality). Violated invariants are listed in ``violations`` with their
    magnitude; nothing is raised. ``e_prev`` skips re-evaluating the energy
    of ``prev`` when the caller already has it.
    """
    V = as_values(next)
    masses = mesh.integrate(V)
    if initial_masses is None:
        initial_masses = masses if prev is None else mesh.integrate(as_values(prev))
    drift = float(np.max(np.abs(masses - np.asarray(initial_masses))))
    vf = float(np.max(np.abs(V.sum(axis=0) - 1.0)))
    vmin, vmax = float(V.min()), float(V.max())

    violations: dict = {}
    if vmin <= 0:
        violations["positivity"] = vmin
    energy = discrete_energy(mesh, V, params) if vmin >= 0 else EnergyBreakdown(math.nan, math.nan)

    diss, slack = math.nan, math.nan
    if prev is not None:
        P = as_values(prev)
        diss = dissipation(mesh, params, V, P)
        if e_prev is None:
            e_prev = discrete_energy(mesh, P, params).e_total
        slack = energy.e_total - e_prev + dt * diss
        tol = thresholds.energy_slack * (1 + abs(e_prev))
        if not slack <= tol:
            violations["energy"] = slack
        if not diss >= 0:
            violations["dissipation"] = diss

    if drift > thresholds.mass_drift:
        violations["mass"] = drift
    if vf > thresholds.volume_filling:
        violations["volume_filling"] = vf

    el = math.nan
    if 0 < V[0].min() and V[0].max() < 1:
        el = float(np.max(np.abs(el_residual_field(mesh, params, V[0]))))
    re = math.nan
    if reference is not None and vmin >= 0:
        re = relative_energy(mesh, V, reference, params)

    return StepDiagnostics(
        step=step, time=float(next.time), dt=float(dt), energy=energy, dissipation=diss,
        masses=masses, min_u=vmin, max_u=vmax, volume_filling_defect=vf,
        el_residual=el, relative_energy=re, newton_iters=newton_iters,
        mass_drift=drift, energy_slack=slack, violations=violations,
    )
