"""Implicit two-point finite volume scheme.

One time step solves, for every species ``i`` and cell ``K``::

    m_K (U_iK - U_iK^prev) / dt + sum_{sigma in E_K,int} J_iKsigma = 0

with log-mean edge fractions and the convex-concave split of the
Cahn-Hilliard potential. All ``n + 1`` species are unknowns; the per-cell
sum is never imposed, only checked.
"""

from __future__ import annotations

import logging
import weakref
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import diagnostics
from .mesh import Mesh
from .model import (
    EnergyDomainError,
    ModelParams,
    chemical_potentials,
    edge_fractions,
    log_mean_partials,
    w0_half,
)
from .state import State, as_values

log = logging.getLogger(__name__)

DIVERGENCE_BOX = (-0.1, 1.1)


class NewtonFailure(RuntimeError):
    def __init__(self, message: str, residual_norm: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class SolverAbort(RuntimeError):
    """Time step fell below ``dt_min`` without a converged Newton solve."""

    def __init__(self, message: str, residual_norm: float, time: float):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.time = time


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    dt_max: float = 1e-3
    dt_min: float = 1e-12
    dt_grow: float = 1.2
    dt_shrink: float = 0.5

    def __post_init__(self):
        if not 0 < self.dt_min <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt_max")
        if not self.dt_shrink < 1 < self.dt_grow:
            raise ValueError("need dt_shrink < 1 < dt_grow")
        if self.dt_shrink <= 0:
            raise ValueError("dt_shrink must be positive")
        if self.newton_tol <= 0 or self.newton_max_iter < 1:
            raise ValueError("invalid Newton settings")


# initial data ------------------------------------------------------------------

def project_initial(profiles: Sequence[Callable], mesh: Mesh, time: float = 0.0) -> State:
    """Cell averages of pointwise profiles by the midpoint rule.

    Each profile is called with the ``(n_cells, d)`` array of cell centers
    and must return one value per cell.
    """
    values = np.array([np.broadcast_to(np.asarray(p(mesh.centers), dtype=float), (mesh.n_cells,))
                       for p in profiles])
    if np.any(values < 0) or np.any(values > 1):
        raise ValueError("initial profiles must take values in [0, 1]")
    return State(values, time)


# fluxes ------------------------------------------------------------------------

def _split_coefficient(Us: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Coefficient multiplying ``tau D W_0`` in each species' flux."""
    c = K[:, :1] * Us * Us[0]
    c[0] = -np.sum(c[1:], axis=0)
    return c


@dataclass
class _EdgeState:
    """Edge quantities shared by the residual and its derivative."""

    Us: np.ndarray
    DU: np.ndarray
    DW0: np.ndarray
    KU: np.ndarray
    KD: np.ndarray


def _edge_state(mesh: Mesh, params: ModelParams, V: np.ndarray, P: np.ndarray) -> _EdgeState:
    K = params.K
    Us = edge_fractions(V, mesh)
    DU = mesh.edge_jumps(V)
    DW0 = mesh.edge_jumps(w0_half(mesh, V[0], P[0], params))
    return _EdgeState(Us, DU, DW0, K @ Us, K @ DU)


def _fluxes_from(mesh: Mesh, params: ModelParams, es: _EdgeState) -> np.ndarray:
    cross = es.DU * es.KU - es.Us * es.KD
    return mesh.tau * (_split_coefficient(es.Us, params.K) * es.DW0 - cross)


def fluxes(mesh: Mesh, params: ModelParams, U_next, U_prev) -> np.ndarray:
    """Oriented fluxes ``J[i, e]`` seen from the owner cell of edge ``e``.

    The neighbour sees ``-J[i, e]``. The species sum vanishes on every edge.
    """
    V, P = as_values(U_next), as_values(U_prev)
    return _fluxes_from(mesh, params, _edge_state(mesh, params, V, P))


def fluxes_entropic(mesh: Mesh, params: ModelParams, U_next, U_prev) -> np.ndarray:
    """The same fluxes rewritten through potential jumps (positive states only)."""
    V = as_values(U_next)
    if np.any(V <= 0):
        raise EnergyDomainError("entropic fluxes need strictly positive fractions")
    mu = chemical_potentials(mesh, V, U_prev, params)
    Us = edge_fractions(V, mesh)
    Dmu = mesh.edge_jumps(mu)
    S = params.n_species
    J = np.zeros_like(Us)
    for i in range(S):
        for j in range(S):
            if j != i:
                J[i] -= params.K[i, j] * Us[i] * Us[j] * (Dmu[i] - Dmu[j])
    return mesh.tau * J


def residual(mesh: Mesh, params: ModelParams, U_next, U_prev, dt: float) -> np.ndarray:
    """Left-hand side of the conservation equations, shape ``(S, n_cells)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    V, P = as_values(U_next), as_values(U_prev)
    return _linearize(mesh, params, V, P, dt)[0]


# Jacobian ----------------------------------------------------------------------

class _Pattern:
    """Fixed sparsity of the Newton matrix for one (mesh, species count, eps).

    With ``augmented=False`` the unknowns are the ``S * N`` fractions and the
    W_0 coupling enters through ``D G``, a wide stencil. With
    ``augmented=True`` the cell values of W_0 are appended as ``N`` extra
    unknowns tied to U_0 by ``W - G U_0 = 0``; eliminating them recovers
    the reduced matrix exactly, and the narrower stencil factorizes with
    far less fill.
    """

    def __init__(self, mesh: Mesh, n_species: int, epsilon: float, augmented: bool):
        S, N = n_species, mesh.n_cells
        self.augmented = augmented
        self.size = (S + 1) * N if augmented else S * N
        k, l = mesh.edge_cells[:, 0], mesh.edge_cells[:, 1]
        sp_i = np.arange(S)

        rows, cols = [], []
        # time derivative
        diag = (sp_i[:, None] * N + np.arange(N)).ravel()
        rows.append(diag)
        cols.append(diag)
        # local two-cell dependence, data layout [a, b, -a, -b] x (S, S, E)
        rK = (sp_i[:, None, None] * N + k).repeat(S, axis=1)
        rL = (sp_i[:, None, None] * N + l).repeat(S, axis=1)
        cK = (sp_i[None, :, None] * N + k).repeat(S, axis=0)
        cL = (sp_i[None, :, None] * N + l).repeat(S, axis=0)
        for r, c in ((rK, cK), (rK, cL), (rL, cK), (rL, cL)):
            rows.append(r.ravel())
            cols.append(c.ravel())
        G = (-epsilon * sp.diags(1.0 / mesh.measures) @ mesh.laplacian_matrix()).tocoo()
        if augmented:
            # flux dependence on the W_0 jump, layout [-w, w, w, -w] x (S, E)
            wK, wL = S * N + k, S * N + l
            for r, c in ((rK[:, 0], wK), (rK[:, 0], wL), (rL[:, 0], wK), (rL[:, 0], wL)):
                rows.append(r.ravel())
                cols.append(np.broadcast_to(c, r.shape).ravel())
            # closure rows W - G U_0 = 0
            rows.append(S * N + np.arange(N))
            cols.append(S * N + np.arange(N))
            rows.append(S * N + G.row)
            cols.append(G.col)
            self.closure = np.concatenate([np.ones(N), -G.data])
        else:
            H = (mesh.difference_matrix() @ G.tocsr()).tocoo()
            self.h_edge, self.h_val = H.row, H.data
            for i in range(S):
                rows.append(i * N + k[H.row])
                cols.append(H.col)
                rows.append(i * N + l[H.row])
                cols.append(H.col)

        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        lin = cols.astype(np.int64) * self.size + rows
        uniq, self.inverse = np.unique(lin, return_inverse=True)
        self.indices = (uniq % self.size).astype(np.int32)
        col_of = uniq // self.size
        self.indptr = np.searchsorted(col_of, np.arange(self.size + 1)).astype(np.int32)
        self.nnz = uniq.size


_patterns: "weakref.WeakKeyDictionary[Mesh, dict]" = weakref.WeakKeyDictionary()


def _pattern(mesh: Mesh, params: ModelParams, augmented: bool = False) -> _Pattern:
    cache = _patterns.setdefault(mesh, {})
    key = (params.n_species, params.epsilon, augmented)
    if key not in cache:
        cache[key] = _Pattern(mesh, *key)
    return cache[key]


def _local_derivatives(mesh: Mesh, params: ModelParams, V: np.ndarray, es: _EdgeState):
    """Per-edge partials of J with respect to the owner (a) and neighbour (b)
    values, and the coefficient multiplying the jump of W_0."""
    K, tau = params.K, mesh.tau
    S = params.n_species
    eye = np.eye(S)[:, :, None]
    la, lb = log_mean_partials(V[:, mesh.edge_cells[:, 0]], V[:, mesh.edge_cells[:, 1]])
    Us, DU, KU, KD = es.Us, es.DU, es.KU, es.KD
    Kx = K[:, :, None]

    dJ_dDU = -tau * (eye * KU[:, None, :] - Us[:, None, :] * Kx)
    dJ_dUs = -tau * (DU[:, None, :] * Kx - eye * KD[:, None, :])

    dc = np.zeros((S, S) + Us.shape[1:])
    dc[1:, 0] = K[1:, 0, None] * Us[1:]
    idx = np.arange(1, S)
    dc[idx, idx] = K[1:, 0, None] * Us[0]
    dc[0, 0] = -KU[0]
    dc[0, 1:] = -K[0, 1:, None] * Us[0]
    dJ_dUs += tau * es.DW0 * dc

    a = -dJ_dDU + dJ_dUs * la[None, :, :]
    b = dJ_dDU + dJ_dUs * lb[None, :, :]
    w = tau * _split_coefficient(Us, K)
    return a, b, w


def _assemble(mesh: Mesh, params: ModelParams, V: np.ndarray, es: _EdgeState,
              dt: float, augmented: bool = False) -> sp.csc_matrix:
    pat = _pattern(mesh, params, augmented)
    a, b, w = _local_derivatives(mesh, params, V, es)
    S = params.n_species
    parts = [np.tile(mesh.measures / dt, S), a.ravel(), b.ravel(), -a.ravel(), -b.ravel()]
    if augmented:
        parts += [-w.ravel(), w.ravel(), w.ravel(), -w.ravel(), pat.closure]
    else:
        hw = w[:, pat.h_edge] * pat.h_val
        parts.append(np.stack([hw, -hw], axis=1).ravel())
    values = np.bincount(pat.inverse, weights=np.concatenate(parts), minlength=pat.nnz)
    return sp.csc_matrix((values, pat.indices, pat.indptr), shape=(pat.size, pat.size))


def jacobian(mesh: Mesh, params: ModelParams, U_next, U_prev, dt: float) -> sp.csc_matrix:
    """Exact derivative of :func:`residual` with respect to ``U_next``.

    Unknowns are ordered species-major: index ``i * n_cells + K``.
    """
    V, P = as_values(U_next), as_values(U_prev)
    return _assemble(mesh, params, V, _edge_state(mesh, params, V, P), dt)


def _linearize(mesh: Mesh, params: ModelParams, V: np.ndarray, P: np.ndarray, dt: float):
    es = _edge_state(mesh, params, V, P)
    R = mesh.measures * (V - P) / dt + mesh.flux_divergence(_fluxes_from(mesh, params, es))
    return R, es


# Newton and time stepping --------------------------------------------------------

@dataclass
class NewtonResult:
    state: State
    iterations: int
    update_norm: float
    residual_norm: float


def newton_solve(mesh: Mesh, params: ModelParams, U_prev, dt: float,
                 config: SolverConfig = SolverConfig()) -> NewtonResult:
    """Solve one backward Euler step starting from ``U_prev``.

    Raises :class:`NewtonFailure` when the iteration limit is hit, the
    linearization is singular, or an iterate leaves ``[-0.1, 1.1]``.
    """
    P = as_values(U_prev)
    t0 = U_prev.time if isinstance(U_prev, State) else 0.0
    V = P.copy()
    R, es = _linearize(mesh, params, V, P, dt)
    res_norm = float(np.max(np.abs(R)))
    if res_norm == 0.0:
        return NewtonResult(State(V, t0 + dt), 0, 0.0, 0.0)

    lo, hi = DIVERGENCE_BOX
    for it in range(1, config.newton_max_iter + 1):
        Jm = _assemble(mesh, params, V, es, dt, augmented=True)
        rhs = np.concatenate([-R.ravel(), np.zeros(mesh.n_cells)])
        try:
            delta = splu(Jm).solve(rhs)[: R.size]
        except RuntimeError as exc:
            raise NewtonFailure(f"singular linearization: {exc}", res_norm, it) from exc
        if not np.all(np.isfinite(delta)):
            raise NewtonFailure("non-finite Newton update", res_norm, it)
        V = V + delta.reshape(V.shape)
        update = float(np.max(np.abs(delta)))
        if V.min() < lo or V.max() > hi:
            raise NewtonFailure(f"iterate left [{lo}, {hi}]", res_norm, it)
        R, es = _linearize(mesh, params, V, P, dt)
        res_norm = float(np.max(np.abs(R)))
        if update <= config.newton_tol:
            return NewtonResult(State(V, t0 + dt), it, update, res_norm)
    raise NewtonFailure(f"no convergence in {config.newton_max_iter} iterations",
                        res_norm, config.newton_max_iter)


@dataclass
class StepResult:
    state: State
    dt_used: float
    dt_next: float
    newton_iters: int
    rejected: int


def advance(state: State, mesh: Mesh, params: ModelParams, config: SolverConfig,
            dt: Optional[float] = None, t_stop: Optional[float] = None) -> StepResult:
    """One accepted step with adaptive ``dt``.

    ``dt`` is the proposed step (defaults to ``dt_max``); ``t_stop`` caps the
    step so the new time does not pass it. On Newton failure the step is
    multiplied by ``dt_shrink`` and retried; below ``dt_min`` the run aborts.
    """
    dt = config.dt_max if dt is None else min(dt, config.dt_max)
    trial = dt
    capped = False
    # a remainder far below the step would only produce a round-off sliver
    if t_stop is not None and t_stop - (state.time + trial) <= 1e-6 * trial:
        trial, capped = t_stop - state.time, True
    rejected = 0
    last_norm = float("nan")
    while True:
        if trial < config.dt_min and not (capped and trial > 0):
            raise SolverAbort(f"time step {trial:.3e} fell below dt_min at t = {state.time:.6g}",
                              last_norm, state.time)
        try:
            res = newton_solve(mesh, params, state, trial, config)
        except NewtonFailure as exc:
            last_norm = exc.residual_norm
            rejected += 1
            log.debug("Newton failed at t=%g, dt=%g: %s", state.time, trial, exc)
            trial *= config.dt_shrink
            capped = False
            continue
        new_time = t_stop if capped else state.time + trial
        new_state = State(res.state.values, new_time)
        if capped and rejected == 0:
            dt_next = dt
        else:
            dt_next = min(trial * config.dt_grow, config.dt_max)
        return StepResult(new_state, trial, dt_next, res.iterations, rejected)


@dataclass
class Trajectory:
    """Accepted states of a run: per-step diagnostics plus stored snapshots."""

    diagnostics: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    final: Optional[State] = None
    initial_masses: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        return np.array([d.time for d in self.diagnostics])

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(d, name) for d in self.diagnostics])


def run(initial: State, mesh: Mesh, params: ModelParams, config: SolverConfig,
        t_end: float, snapshot_times: Sequence[float] = (),
        reference: Optional[State] = None,
        on_step: Optional[Callable] = None) -> Trajectory:
    """Advance ``initial`` to ``t_end``, recording diagnostics at every step.

    Steps are shortened so that every snapshot time is hit exactly. If
    ``params`` has no masses they are taken from ``initial``. ``reference``
    (e.g. the constant steady state) feeds the relative-energy column.
    ``on_step(diag, state)`` is called after each accepted step.
    """
    if t_end < initial.time:
        raise ValueError("t_end precedes the initial time")
    if params.masses is None:
        params = params.with_masses(mesh.integrate(initial.values))
    masses0 = mesh.integrate(initial.values)
    stops = sorted({float(t) for t in snapshot_times if initial.time < t < t_end} | {float(t_end)})

    traj = Trajectory(initial_masses=masses0)
    state = initial.copy()
    diag = diagnostics.check_step(mesh, params, None, state, 0.0, step=0,
                                  initial_masses=masses0, reference=reference)
    traj.diagnostics.append(diag)
    if any(abs(t - initial.time) <= 1e-12 for t in snapshot_times):
        traj.snapshots[initial.time] = state.copy()
    if on_step:
        on_step(diag, state)

    dt = config.dt_max
    step = 0
    for stop in stops:
        while state.time < stop:
            res = advance(state, mesh, params, config, dt, t_stop=stop)
            step += 1
            diag = diagnostics.check_step(mesh, params, state, res.state, res.dt_used, step=step,
                                          initial_masses=masses0, reference=reference,
                                          newton_iters=res.newton_iters,
                                          e_prev=diag.e_total)
            state, dt = res.state, res.dt_next
            traj.diagnostics.append(diag)
            if on_step:
                on_step(diag, state)
        if any(abs(t - stop) <= 1e-12 for t in snapshot_times):
            traj.snapshots[stop] = state.copy()
    traj.final = state
    return traj
