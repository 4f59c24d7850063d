"""Critical points of the energy under the mass and volume-filling constraints.

At such points species 0 solves a scalar semilinear Neumann problem::

    -eps Lap u0 = f(u0) - mean(f(u0)),   f(v) = ln((1 - v)/v) - beta (1 - 2 v)

and the remaining species are proportional to ``1 - u0``. The Laplacian is the
same two-point operator used by the time-dependent scheme. Solutions returned
here are critical points; nothing certifies that they are minimizers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import expit, logit

from .mesh import Mesh
from .model import ModelParams
from .state import State, as_values

BOX_MARGIN = 1e-12


class StationaryFailure(RuntimeError):
    pass


def _nonlinearity(v, beta):
    return np.log((1 - v) / v) - beta * (1 - 2 * v)


def _nonlinearity_prime(v, beta):
    return -1 / (1 - v) - 1 / v + 2 * beta


def _bulk_density(v, beta):
    # antiderivative of -f; its cell sum plus the gradient term is the merit function
    return v * np.log(v) + (1 - v) * np.log1p(-v) + beta * v * (1 - v)


def _merit(mesh: Mesh, u, epsilon: float, beta: float) -> float:
    """Reduced energy whose constrained critical points solve the EL system."""
    jumps = mesh.edge_jumps(u)
    return float(0.5 * epsilon * np.sum(mesh.tau * jumps ** 2)
                 + mesh.integrate(_bulk_density(u, beta)))


def discrete_laplacian(mesh: Mesh, u0) -> np.ndarray:
    """``(1/m_K) sum_sigma tau_sigma D_{K sigma} u0``; boundary faces add nothing."""
    return mesh.laplacian_sum(u0) / mesh.measures


def el_residual_field(mesh: Mesh, params: ModelParams, u0) -> np.ndarray:
    """Cellwise residual ``-eps Lap u0 - f(u0) + mean_m f(u0)``.

    Its ``m_K``-weighted mean vanishes by construction.
    """
    u0 = np.asarray(u0, dtype=float)
    if np.any(u0 <= 0) or np.any(u0 >= 1):
        raise ValueError("u0 must lie strictly inside (0, 1)")
    f = _nonlinearity(u0, params.beta)
    mean_f = mesh.integrate(f) / mesh.domain_measure
    return -params.epsilon * discrete_laplacian(mesh, u0) - f + mean_f


def reconstruct_species(u0, params: ModelParams, domain_measure: float) -> State:
    """Full state from ``u0``: ``u_i = m_i / (|Omega| - m_0) (1 - u0)`` for ``i >= 1``."""
    if params.masses is None:
        raise ValueError("params carry no masses")
    u0 = np.asarray(u0, dtype=float)
    masses = np.asarray(params.masses)
    rest = masses[1:] / (domain_measure - masses[0])
    values = np.vstack([u0, rest[:, None] * (1 - u0)])
    return State(values)


def proportionality_defect(U, masses, domain_measure: float) -> float:
    """``max_i ||u_i - m_i/(|Omega| - m_0) (1 - u_0)||_inf`` over ``i >= 1``."""
    V = as_values(U)
    masses = np.asarray(masses, dtype=float)
    target = masses[1:, None] / (domain_measure - masses[0]) * (1 - V[0])
    return float(np.max(np.abs(V[1:] - target)))


def observed_bound(U) -> float:
    """Largest ``delta`` with ``delta <= U <= 1 - delta`` everywhere."""
    V = as_values(U)
    return float(min(V.min(), 1 - V.max()))


@dataclass
class StationarySolution:
    u0: np.ndarray
    multiplier: float
    species: State
    residual_norm: float
    iterations: int

    @property
    def delta(self) -> float:
        return observed_bound(self.species)


def solve_stationary(mesh: Mesh, params: ModelParams, m0: float, guess,
                     tol: float = 1e-10, max_iter: int = 100) -> StationarySolution:
    """Globalized Newton on ``(u0, lambda0)``.

    Equations: ``-eps Lap u0 - f(u0) + lambda0 = 0`` in every cell and
    ``sum_K m_K u0_K = m0``. Each Newton step ``du`` is applied through the
    logit ``w = ln(u0 / (1 - u0))`` as ``w + theta du / (u0 (1 - u0))``, which
    keeps iterates inside ``(gamma, 1 - gamma)`` without creeping along the
    box. When the step descends the reduced energy (always the case where
    that energy is convex) ``theta`` is halved until the energy decreases
    sufficiently; otherwise ``theta = 1``. Converged when the mean-subtracted
    residual and the mass defect are both below ``tol``.
    """
    omega = mesh.domain_measure
    if params.masses is None:
        raise ValueError("params carry no masses; species 1..n cannot be reconstructed")
    if not 0 < m0 < omega:
        raise ValueError("need 0 < m0 < |Omega|")
    u = np.array(guess, dtype=float).reshape(-1)
    if u.shape[0] != mesh.n_cells:
        raise ValueError("guess has the wrong number of cells")
    if np.any(u <= 0) or np.any(u >= 1):
        raise ValueError("guess must lie strictly inside (0, 1)")
    # start from a mass-feasible point; the shift keeps the shape of the guess
    u = np.clip(u + (m0 - mesh.integrate(u)) / omega, BOX_MARGIN, 1 - BOX_MARGIN)

    N = mesh.n_cells
    m = mesh.measures
    beta, eps = params.beta, params.epsilon
    A = sp.diags(1.0 / m) @ mesh.laplacian_matrix()
    w_max = float(logit(1 - BOX_MARGIN))
    w = np.clip(logit(u), -w_max, w_max)
    u = expit(w)
    lam = float(mesh.integrate(_nonlinearity(u, beta)) / omega)

    for it in range(1, max_iter + 1):
        F = -eps * (A @ u) - _nonlinearity(u, beta) + lam
        g = mesh.integrate(u) - m0
        res = float(np.max(np.abs(el_residual_field(mesh, params, u))))
        if res <= tol and abs(g) <= tol * omega:
            return StationarySolution(u, lam, reconstruct_species(u, params, omega), res, it - 1)

        J = sp.bmat([
            [-eps * A - sp.diags(_nonlinearity_prime(u, beta)), np.ones((N, 1))],
            [m[None, :], None],
        ], format="csc")
        try:
            step = splu(J).solve(-np.concatenate([F, [g]]))
        except RuntimeError as exc:
            raise StationaryFailure(f"singular linearization: {exc}") from exc
        if not np.all(np.isfinite(step)):
            raise StationaryFailure("non-finite Newton step")
        du, dlam = step[:N], step[N]
        dw = du / (u * (1 - u))

        def trial(theta):
            return expit(np.clip(w + theta * dw, -w_max, w_max))

        theta = 1.0
        # gradient of the merit function is m * (F - lam)
        slope = float(np.dot(m * (F - lam), du))
        if slope < 0:
            phi = _merit(mesh, u, eps, beta)
            while theta > 1e-10 and _merit(mesh, trial(theta), eps, beta) > phi + 1e-4 * theta * slope:
                theta *= 0.5
        w = np.clip(w + theta * dw, -w_max, w_max)
        u = expit(w)
        lam = lam + theta * dlam

    raise StationaryFailure(f"no convergence in {max_iter} iterations (residual {res:.3e})")
