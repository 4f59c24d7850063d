import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdiff_ch.diagnostics import Thresholds, check_step, dissipation, fit_exponential_rate
from crossdiff_ch.mesh import build_interval_mesh, build_rect_mesh
from crossdiff_ch.model import (
    ModelParams,
    chemical_potentials,
    constant_steady_state,
    discrete_energy,
    three_species_coeffs,
)
from crossdiff_ch.scheme import fluxes
from crossdiff_ch.state import State

COEFFS = three_species_coeffs(0.2, 1.0, 0.1)


def random_state(rng, n_cells, n_species=3, low=0.02):
    V = rng.uniform(low, 1.0, (n_species, n_cells))
    return V / V.sum(axis=0)


def test_constant_state_has_zero_dissipation():
    mesh = build_rect_mesh(4, 3)
    V = np.repeat(np.array([[0.2], [0.3], [0.5]]), mesh.n_cells, axis=1)
    assert dissipation(mesh, ModelParams(0.5, 3.0, COEFFS), V, V) == 0.0


def test_nonpositive_state_gives_undefined_dissipation():
    mesh = build_interval_mesh(3)
    V = np.array([[0.0, 0.5, 0.5], [0.5, 0.25, 0.25], [0.5, 0.25, 0.25]])
    assert math.isnan(dissipation(mesh, ModelParams(1, 1, COEFFS), V, V))


def _mp_log_mean(a, b):
    a, b = mp.mpf(a), mp.mpf(b)
    return a if a == b else (a - b) / (mp.log(a) - mp.log(b))


def test_two_cell_dissipation_matches_high_precision_oracle():
    with mp.workdps(40):
        mesh = build_interval_mesh(2)  # m = 1/2, tau = 2
        eps, beta = 0.3, 2.5
        V = np.array([[0.2, 0.45], [0.5, 0.15], [0.3, 0.4]])
        P = np.array([[0.3, 0.35], [0.3, 0.35], [0.4, 0.3]])
        K = [[0, 0.2, 1.0], [0.2, 0, 0.1], [1.0, 0.1, 0]]
        m, tau = mp.mpf("0.5"), mp.mpf(2)
        # potentials: ln u, plus W0 = -eps (tau/m) (u0_L - u0_K) + beta (1 - 2 u0_prev) on species 0
        mu = [[mp.log(mp.mpf(V[i, k])) for k in range(2)] for i in range(3)]
        for k in range(2):
            lap = tau * (mp.mpf(V[0, 1 - k]) - mp.mpf(V[0, k]))
            mu[0][k] += -eps * lap / m + beta * (1 - 2 * mp.mpf(P[0, k]))
        us = [_mp_log_mean(V[i, 0], V[i, 1]) for i in range(3)]
        x = [mu[i][1] - mu[i][0] for i in range(3)]
        M = mp.matrix(3, 3)
        for i in range(3):
            for j in range(3):
                if i != j:
                    M[i, j] = -K[i][j] * us[i] * us[j]
            M[i, i] = sum(K[i][j] * us[i] * us[j] for j in range(3) if j != i)
        xv = mp.matrix(x)
        expected = tau * (xv.T * M * xv)[0]
        got = dissipation(mesh, ModelParams(eps, beta, COEFFS), V, P)
        assert got == pytest.approx(float(expected), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 5), st.floats(0, 10))
def test_dissipation_nonnegative_and_equal_to_flux_pairing(seed, eps, beta):
    rng = np.random.default_rng(seed)
    mesh = build_rect_mesh(4, 3)
    V, P = random_state(rng, mesh.n_cells), random_state(rng, mesh.n_cells)
    p = ModelParams(eps, beta, COEFFS)
    D = dissipation(mesh, p, V, P)
    assert D >= 0
    mu = chemical_potentials(mesh, V, P, p)
    J = fluxes(mesh, p, V, P)
    pairing = float(np.sum(mu * mesh.flux_divergence(J)))
    scale = float(np.sum(np.abs(J * mesh.edge_jumps(mu))))
    assert abs(D - pairing) <= 1e-9 * max(D, scale, 1e-300)


def test_fit_exact_exponential():
    t = np.array([0.0, 0.5, 1.0])
    rate, r2 = fit_exponential_rate(t, np.exp(-2 * t))
    assert rate == pytest.approx(2.0, rel=1e-12)
    assert r2 == pytest.approx(1.0, abs=1e-12)


def test_fit_constant_series():
    rate, r2 = fit_exponential_rate([0, 1, 2, 3], [0.7] * 4)
    assert rate == pytest.approx(0.0, abs=1e-14)
    assert r2 == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3), st.integers(3, 30))
def test_fit_recovers_any_log_linear_rate(rate, logc, n):
    t = np.linspace(0, 2, n)
    got, r2 = fit_exponential_rate(t, np.exp(logc - rate * t))
    assert got == pytest.approx(rate, abs=1e-9)
    assert r2 == pytest.approx(1.0, abs=1e-9)


def test_fit_noisy_data_has_lower_r_squared():
    t = np.linspace(0, 1, 10)
    v = np.exp(-t) * np.array([1, 2, 1, 2, 1, 2, 1, 2, 1, 2])
    _, r2 = fit_exponential_rate(t, v)
    assert r2 < 0.9


def test_fit_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_exponential_rate([0, 1, 2], [1.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        fit_exponential_rate([0, 1, 2], [1.0, -1.0, 1.0])
    with pytest.raises(ValueError):
        fit_exponential_rate([0, 1], [1.0, 0.5])
    with pytest.raises(ValueError):
        fit_exponential_rate([0, 1, 2], [1.0, 0.5])


def test_check_step_constant_state():
    mesh = build_interval_mesh(10)
    p = ModelParams(1.0, 1.0, COEFFS, masses=(0.25, 0.25, 0.5))
    U = constant_steady_state(mesh, p)
    nxt = State(U.values.copy(), time=0.1)
    d = check_step(mesh, p, U, nxt, 0.1, step=1, reference=U)
    assert d.ok
    assert d.dissipation == 0.0
    assert d.mass_drift == 0.0
    assert d.volume_filling_defect == 0.0
    assert d.el_residual == pytest.approx(0.0, abs=1e-14)
    assert d.relative_energy == pytest.approx(0.0, abs=1e-15)
    assert d.energy_slack == pytest.approx(0.0, abs=1e-15)


def test_check_step_reports_volume_filling_defect():
    mesh = build_interval_mesh(4)
    p = ModelParams(1.0, 1.0, COEFFS)
    V = np.full((3, 4), 1 / 3)
    bad = V.copy()
    bad[2, 1] += 0.1
    d = check_step(mesh, p, State(V), State(bad, time=0.1), 0.1, step=1)
    assert d.volume_filling_defect == pytest.approx(0.1, rel=1e-12)
    assert d.violations["volume_filling"] == pytest.approx(0.1, rel=1e-12)
    assert "mass" in d.violations


def test_check_step_reports_positivity_and_energy_increase():
    mesh = build_interval_mesh(4)
    p = ModelParams(1.0, 1.0, COEFFS)
    flat = np.full((3, 4), 1 / 3)
    bumpy = np.array([[0.1, 0.6, 0.1, 0.6], [0.45, 0.2, 0.45, 0.2], [0.45, 0.2, 0.45, 0.2]])
    d = check_step(mesh, p, State(flat), State(bumpy, time=1.0), 1.0, step=1,
                   initial_masses=mesh.integrate(bumpy))
    assert "energy" in d.violations
    neg = flat.copy()
    neg[0, 0], neg[1, 0] = -0.01, 1 / 3 + 0.01
    d = check_step(mesh, p, State(flat), State(neg, time=1.0), 1.0, step=1)
    assert d.violations["positivity"] == pytest.approx(-0.01)


def test_check_step_initial_state_has_no_dissipation():
    mesh = build_interval_mesh(5)
    p = ModelParams(1.0, 1.0, COEFFS)
    V = random_state(np.random.default_rng(3), 5)
    d = check_step(mesh, p, None, State(V), 0.0)
    assert math.isnan(d.dissipation)
    assert d.ok
    assert d.e_total == pytest.approx(discrete_energy(mesh, V, p).e_total)


def test_check_step_uses_given_previous_energy():
    mesh = build_interval_mesh(5)
    p = ModelParams(1.0, 1.0, COEFFS)
    rng = np.random.default_rng(4)
    P, V = random_state(rng, 5), random_state(rng, 5)
    a = check_step(mesh, p, State(P), State(V, time=0.1), 0.1)
    b = check_step(mesh, p, State(P), State(V, time=0.1), 0.1,
                   e_prev=discrete_energy(mesh, P, p).e_total)
    assert a.energy_slack == b.energy_slack


def test_thresholds_defaults():
    t = Thresholds()
    assert t.mass_drift == 1e-9 and t.volume_filling == 1e-9 and t.energy_slack == 1e-10
