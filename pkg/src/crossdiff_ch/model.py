"""Free energy, mobility and chemical potentials of the cross-diffusion
Cahn-Hilliard system, plus the convexity and stability bounds.

Species 0 is the one that phase-separates; species ``1..n`` only
cross-diffuse. Energy density per cell::

    sum_i (u_i ln u_i - u_i + 1) + beta u_0 (1 - u_0)

plus ``eps/2 sum_sigma tau_sigma |D u_0|^2`` over interior edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import xlogy

from .mesh import Mesh
from .state import State, as_values

# below this relative gap the log mean and its partials use a Taylor series
_SERIES_GAP = 1e-3


class EnergyDomainError(ValueError):
    """Raised when an energy or potential is requested for a negative state."""


@dataclass(frozen=True)
class ModelParams:
    """Model coefficients.

    ``coeffs`` is the symmetric matrix of cross-diffusion coefficients
    ``K_ij``; its diagonal is ignored. ``masses`` may be left unset until the
    parameters are bound to an initial state.
    """

    epsilon: float
    beta: float
    coeffs: tuple
    masses: Optional[tuple] = None
    _K: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.array(self.coeffs, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] < 2:
            raise ValueError("coeffs must be a square matrix with at least two species")
        if not np.allclose(K, K.T, rtol=0, atol=0):
            raise ValueError("coeffs must be symmetric")
        off = ~np.eye(K.shape[0], dtype=bool)
        if np.any(K[off] <= 0):
            raise ValueError("off-diagonal coefficients must be positive")
        if not (self.epsilon >= 0 and self.beta >= 0):
            raise ValueError("epsilon and beta must be non-negative")
        np.fill_diagonal(K, 0.0)
        K.setflags(write=False)
        object.__setattr__(self, "coeffs", tuple(tuple(float(x) for x in row) for row in self.coeffs))
        object.__setattr__(self, "_K", K)
        if self.masses is not None:
            masses = tuple(float(m) for m in self.masses)
            if len(masses) != K.shape[0]:
                raise ValueError("one mass per species is required")
            if any(not m > 0 for m in masses):
                raise ValueError("masses must be positive")
            object.__setattr__(self, "masses", masses)

    @property
    def n_species(self) -> int:
        return self._K.shape[0]

    @property
    def K(self) -> np.ndarray:
        """Coefficient matrix with the diagonal zeroed."""
        return self._K

    @property
    def k_min(self) -> float:
        off = ~np.eye(self.n_species, dtype=bool)
        return float(self._K[off].min())

    def with_masses(self, masses) -> "ModelParams":
        return ModelParams(self.epsilon, self.beta, self.coeffs, tuple(masses))


def three_species_coeffs(k01: float, k02: float, k12: float) -> tuple:
    return ((0.0, k01, k02), (k01, 0.0, k12), (k02, k12, 0.0))


# logarithmic mean ------------------------------------------------------------

def _ordered(a, b):
    """Sort into ``hi >= lo`` and form ``s = lo/hi - 1``, ``r = lo/hi`` and
    ``ell = ln(lo/hi)`` wherever ``lo > 0``."""
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    if np.isnan(a).any() or np.isnan(b).any():
        raise ValueError("log_mean received NaN")
    swap = a < b
    hi = np.where(swap, b, a)
    lo = np.where(swap, a, b)
    pos = lo > 0
    safe_hi = np.where(pos, hi, 1.0)
    s = np.where(pos, (lo - hi) / safe_hi, 0.0)
    r = np.where(pos, lo / safe_hi, 1.0)
    # log1p is accurate for moderate gaps; once lo/hi is small, s rounds to
    # -1 and the ratio itself must be used
    with np.errstate(divide="ignore"):
        ell = np.where(r > 0.5, np.log1p(s), np.log(np.where(r > 0.5, 1.0, r)))
    return hi, s, r, ell, pos, swap


def _series_mask(s):
    return np.abs(s) < _SERIES_GAP


def log_mean(a, b):
    """Logarithmic mean, extended by 0 when either argument is ``<= 0``.

    Exactly symmetric in its arguments; accurate to a few ulps even when
    ``a`` and ``b`` nearly coincide.
    """
    hi, s, _, ell, pos, _ = _ordered(a, b)
    small = _series_mask(s)
    g_series = 1 + s * (0.5 + s * (-1 / 12 + s * (1 / 24 - s * 19 / 720)))
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(small, g_series, s / ell)
    out = np.where(pos, hi * g, 0.0)
    return out[()] if out.ndim == 0 else out


def log_mean_partials(a, b):
    """Partial derivatives of :func:`log_mean` with respect to ``a`` and ``b``.

    Both equal 1/2 on the diagonal and vanish where ``min(a, b) <= 0``.
    """
    _, s, r, ell, pos, swap = _ordered(a, b)
    small = _series_mask(s)
    g_series = 1 + s * (0.5 + s * (-1 / 12 + s * (1 / 24 - s * 19 / 720)))
    dg_series = 0.5 + s * (-1 / 6 + s * (1 / 8 - s * 19 / 180))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ell2 = ell * ell
        d_lo = np.where(small, dg_series, (ell - s / r) / ell2)
        d_hi = np.where(small, g_series - (1 + s) * dg_series, (s - ell) / ell2)
    d_lo = np.where(pos, d_lo, 0.0)
    d_hi = np.where(pos, d_hi, 0.0)
    da = np.where(swap, d_lo, d_hi)
    db = np.where(swap, d_hi, d_lo)
    if da.ndim == 0:
        return da[()], db[()]
    return da, db


def edge_fractions(U, mesh: Mesh) -> np.ndarray:
    """Log-mean value of every species on every interior edge, ``(S, E)``."""
    V = as_values(U)
    return log_mean(V[:, mesh.edge_cells[:, 0]], V[:, mesh.edge_cells[:, 1]])


# mobility --------------------------------------------------------------------

def mobility(u, params_or_coeffs) -> np.ndarray:
    """Degenerate mobility matrix ``M(u)``.

    ``u`` may carry trailing axes (e.g. one column per edge); the result then
    has shape ``(S, S, *trailing)``.
    """
    K = params_or_coeffs.K if isinstance(params_or_coeffs, ModelParams) else np.array(params_or_coeffs, dtype=float)
    K = K * (1 - np.eye(K.shape[0]))
    u = np.asarray(u, dtype=float)
    uu = u[:, None, ...] * u[None, :, ...]
    M = -K.reshape(K.shape + (1,) * (u.ndim - 1)) * uu
    diag = u * np.tensordot(K, u, axes=(1, 0))
    idx = np.arange(K.shape[0])
    M[idx, idx, ...] = diag
    return M


def mobility_form(x, u, params: ModelParams) -> np.ndarray:
    """``x^T M(u) x`` written as a sum of non-negative pair terms.

    Uses ``x^T M x = sum_{i<j} K_ij u_i u_j (x_i - x_j)^2``, so the result is
    non-negative in floating point whenever ``u >= 0``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    total = np.zeros(np.broadcast_shapes(x.shape[1:], u.shape[1:]))
    S = params.n_species
    for i in range(S):
        for j in range(i + 1, S):
            total = total + params.K[i, j] * u[i] * u[j] * (x[i] - x[j]) ** 2
    return total


# energies ----------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyBreakdown:
    e_conv: float
    e_conc: float

    @property
    def e_total(self) -> float:
        return self.e_conv + self.e_conc


def _check_nonnegative(V):
    if np.any(V < 0):
        raise EnergyDomainError(f"negative volume fraction {V.min():.3e}")


def gradient_energy(mesh: Mesh, u0, epsilon: float) -> float:
    d = mesh.edge_jumps(np.asarray(u0, dtype=float))
    return 0.5 * epsilon * float(np.sum(mesh.tau * d * d))


def discrete_energy(mesh: Mesh, U, params: ModelParams) -> EnergyBreakdown:
    """Convex (entropy + gradient) and concave parts of the discrete energy."""
    V = as_values(U)
    _check_nonnegative(V)
    boltzmann = xlogy(V, V) - V + 1.0
    e_conv = float(np.sum(boltzmann @ mesh.measures)) + gradient_energy(mesh, V[0], params.epsilon)
    e_conc = params.beta * float(mesh.integrate(V[0] * (1.0 - V[0])))
    return EnergyBreakdown(e_conv, e_conc)


def _entropy_gap(u, v):
    """``u ln(u/v) - u + v`` computed without cancellation for ``u`` near ``v``."""
    u, v = np.broadcast_arrays(np.asarray(u, dtype=float), np.asarray(v, dtype=float))
    out = np.empty_like(u)
    zero_v = v <= 0
    out[zero_v] = np.where(u[zero_v] > 0, np.inf, 0.0)
    vv = v[~zero_v]
    d = (u[~zero_v] - vv) / vv
    h = np.empty_like(d)
    small = np.abs(d) < _SERIES_GAP
    ds = d[small]
    h[small] = ds * ds * (0.5 + ds * (-1 / 6 + ds * (1 / 12 - ds / 20)))
    db = d[~small]
    hb = np.ones_like(db)  # u = 0 leaves only the "+ v" term
    inside = db > -1
    hb[inside] = (1 + db[inside]) * np.log1p(db[inside]) - db[inside]
    h[~small] = hb
    out[~zero_v] = vv * h
    return out


def bregman_divergence(mesh: Mesh, U, U_ref, params: ModelParams) -> float:
    """``E(U) - E(U_ref) - DE(U_ref).(U - U_ref)`` evaluated term by term."""
    V, W = as_values(U), as_values(U_ref)
    _check_nonnegative(V)
    _check_nonnegative(W)
    ent = float(np.sum(_entropy_gap(V, W) @ mesh.measures))
    diff0 = V[0] - W[0]
    grad = gradient_energy(mesh, diff0, params.epsilon)
    conc = params.beta * float(mesh.integrate(diff0 * diff0))
    return ent + grad - conc


def relative_energy(mesh: Mesh, U, U_ref, params: ModelParams) -> float:
    """``E(U) - E(U_ref)``.

    When ``U_ref`` is spatially constant and carries the same masses as
    ``U`` the linear term of the Bregman divergence vanishes, so the
    cancellation-free Bregman form is returned instead of the raw difference.
    """
    V, W = as_values(U), as_values(U_ref)
    constant = np.all(np.ptp(W, axis=1) == 0)
    if constant:
        mV, mW = mesh.integrate(V), mesh.integrate(W)
        if np.all(np.abs(mV - mW) <= 1e-13 * mesh.domain_measure):
            # the leftover linear term is O(mass mismatch), kept for exactness
            lin = float(np.sum(np.log(W[:, 0]) * (mV - mW)))
            lin += params.beta * (1 - 2 * W[0, 0]) * float(mV[0] - mW[0])
            return bregman_divergence(mesh, V, W, params) + lin
    return discrete_energy(mesh, V, params).e_total - discrete_energy(mesh, W, params).e_total


# chemical potentials -----------------------------------------------------------

def w0_half(mesh: Mesh, U0_next, U0_prev, params: ModelParams) -> np.ndarray:
    """Split auxiliary potential: implicit discrete Laplacian, explicit concave part."""
    U0_next = np.asarray(U0_next, dtype=float)
    U0_prev = np.asarray(U0_prev, dtype=float)
    lap = mesh.laplacian_sum(U0_next)
    return -params.epsilon * lap / mesh.measures + params.beta * (1.0 - 2.0 * U0_prev)


def chemical_potentials(mesh: Mesh, U_next, U_prev, params: ModelParams) -> np.ndarray:
    """Discrete potentials ``mu_i = ln U_i`` and ``mu_0 = ln U_0 + W_0``."""
    V, P = as_values(U_next), as_values(U_prev)
    if np.any(V <= 0):
        raise EnergyDomainError("chemical potentials need strictly positive fractions")
    mu = np.log(V)
    mu[0] += w0_half(mesh, V[0], P[0], params)
    return mu


# steady state and stability ----------------------------------------------------

def constant_steady_state(mesh: Mesh, params: ModelParams) -> State:
    """The constant state ``m_i / |Omega|``."""
    if params.masses is None:
        raise ValueError("params carry no masses")
    masses = np.array(params.masses)
    omega = mesh.domain_measure
    if abs(masses.sum() - omega) > 1e-12 * omega:
        raise ValueError(f"masses sum to {masses.sum()!r}, domain measure is {omega!r}")
    values = np.repeat((masses / omega)[:, None], mesh.n_cells, axis=1)
    return State(values)


@dataclass(frozen=True)
class StabilityReport:
    convexity_margin: float
    convexity_margin_binary: float
    globally_stable: bool
    lambda_: Optional[float]
    c_p: float
    c_sob: float

    def to_text(self) -> str:
        """``name = value`` lines; floats rounded to 12 significant digits."""
        def num(x):
            return format(x, ".12g")

        lam = "undefined" if self.lambda_ is None else num(self.lambda_)
        rows = [
            ("convexity_margin", num(self.convexity_margin)),
            ("convexity_margin_binary", num(self.convexity_margin_binary)),
            ("convex", str(self.convexity_margin >= 0).lower()),
            ("globally_stable", str(self.globally_stable).lower()),
            ("lambda", lam),
            ("c_p", num(self.c_p)),
            ("c_sob", num(self.c_sob)),
        ]
        return "\n".join(f"{k} = {v}" for k, v in rows) + "\n"


def stability_report(params: ModelParams, domain_measure: float,
                     c_p: float = 1.0, c_sob: float = 1.0) -> StabilityReport:
    """Convexity margins, global-stability flag and exponential decay rate.

    ``c_p`` and ``c_sob`` are the Poincare-Wirtinger and log-Sobolev constants
    of the domain; both are taken as given.
    """
    if not (c_p > 0 and c_sob > 0):
        raise ValueError("c_p and c_sob must be positive")
    if params.masses is None:
        raise ValueError("params carry no masses")
    m0 = params.masses[0]
    omega = domain_measure
    gap = params.epsilon / (2 * c_p) - params.beta
    margin = 1 / (2 * m0) + gap / omega
    margin_binary = omega / (2 * m0 * (omega - m0)) + gap / omega
    stable = gap > 0
    lam = None
    if stable:
        lam = 4 * params.k_min * min(1 / c_sob, 1 / c_p - 2 * params.beta / params.epsilon)
    return StabilityReport(margin, margin_binary, stable, lam, c_p, c_sob)
