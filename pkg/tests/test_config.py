from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossdiff_ch import io
from crossdiff_ch.config import (
    PRESETS,
    ConfigError,
    ExperimentConfig,
    InitialSpec,
    MeshSpec,
    build_initial,
    from_ini,
    load_config,
    preset,
    save_config,
    to_ini,
    with_overrides,
)
from crossdiff_ch.diagnostics import check_step
from crossdiff_ch.mesh import build_interval_mesh, build_rect_mesh
from crossdiff_ch.model import ModelParams, three_species_coeffs
from crossdiff_ch.scheme import SolverConfig
from crossdiff_ch.state import State


def test_stable_preset_values():
    c = preset("stable-1d")
    assert c.epsilon == 4.0 and c.beta == 1.0
    assert c.n_species == 3
    mesh = c.mesh.build()
    U = build_initial(c, mesh)
    np.testing.assert_allclose(mesh.integrate(U.values), [0.25, 0.25, 0.5], atol=1e-14)
    assert c.solver.dt_max == 1e-3 and c.t_end == 10.0
    assert c.reference == "constant"


def test_all_presets_share_coefficients():
    K = np.array(three_species_coeffs(0.2, 1.0, 0.1))
    for name in PRESETS:
        c = preset(name)
        np.testing.assert_array_equal(np.array(c.coeffs), K)
        assert c.coeffs[0][1] == 0.2 and c.coeffs[1][2] == 0.1 and c.coeffs[0][2] == 1.0


def test_nonconvex_presets():
    k1, k2 = preset("nonconvex-1d-k1"), preset("nonconvex-1d-k2")
    assert (k1.epsilon, k1.beta, k1.initial.frequency, k1.t_end) == (0.1, 10.0, 1, 8.0)
    assert (k2.epsilon, k2.beta, k2.initial.frequency, k2.t_end) == (0.1, 10.0, 2, 2.0)
    weak = preset("weak-1d")
    assert (weak.epsilon, weak.beta) == (0.5, 2.0)


def test_spinodal_preset():
    c = preset("spinodal-2d")
    assert c.mesh.build().n_cells == 22500
    assert c.solver.dt_max == 5e-3
    assert (c.epsilon, c.beta, c.initial.kappa) == (1e-3, 5.0, 1e-2)
    assert c.initial.base == (0.5, 0.4)
    assert c.snapshots == (0.0, 0.06, 0.13, 0.49, 1.5)
    assert c.t_end == 1.5
    small = preset("spinodal-2d-small")
    assert small.mesh.cells == (64, 64)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("nope")


def test_cosine_initial_profile():
    c = preset("stable-1d")
    mesh = c.mesh.build()
    U = build_initial(c, mesh)
    x = mesh.centers[:, 0]
    expected = 0.25 * (1 + np.cos(np.pi * x))
    np.testing.assert_allclose(U.values[0], expected, rtol=1e-15)
    np.testing.assert_allclose(U.values[1], expected, rtol=1e-15)
    np.testing.assert_array_equal(U.values.sum(axis=0), 1.0)
    # the formula itself reaches (1/2, 1/2, 0) at x = 0; cell averages stay interior
    assert 0.25 * (1 + np.cos(0.0)) == 0.5
    assert U.values.min() > 0


def test_zero_amplitude_gives_constant_state():
    c = with_kappa(preset("stable-1d"), 0.0)
    U = build_initial(c, c.mesh.build())
    np.testing.assert_array_equal(U.values[0], 0.25)
    np.testing.assert_array_equal(U.values[1], 0.25)
    np.testing.assert_array_equal(U.values[2], 0.5)


def with_kappa(config, kappa):
    return replace(config, initial=replace(config.initial, kappa=kappa))


def test_random_initial_is_deterministic_and_documented_stream():
    c = preset("spinodal-2d-small")
    mesh = c.mesh.build()
    a, b = build_initial(c, mesh), build_initial(c, mesh)
    np.testing.assert_array_equal(a.values, b.values)
    rng = np.random.Generator(np.random.PCG64(20240501))
    eta0 = rng.random(mesh.n_cells)
    eta1 = rng.random(mesh.n_cells)
    np.testing.assert_array_equal(a.values[0], 0.5 + 2e-2 * (eta0 - 0.5))
    np.testing.assert_array_equal(a.values[1], 0.4 + 2e-2 * (eta1 - 0.5))
    assert np.ptp(a.values[0]) <= 4 * 1e-2
    other = build_initial(with_overrides(c, seed=1), mesh)
    assert not np.array_equal(other.values, a.values)


def test_random_initial_requires_seed():
    c = with_overrides(preset("spinodal-2d-small"))
    c = replace(c, initial=replace(c.initial, seed=None))
    with pytest.raises(ConfigError):
        build_initial(c, c.mesh.build())


def test_initial_leaving_unit_interval_is_rejected():
    c = with_kappa(preset("stable-1d"), 3.0)
    with pytest.raises(ConfigError):
        build_initial(c, c.mesh.build())


def test_config_validation():
    with pytest.raises(ConfigError):
        MeshSpec((0,), (1.0,))
    with pytest.raises(ConfigError):
        MeshSpec((3, 3, 3), (1.0, 1.0, 1.0))
    with pytest.raises(ConfigError):
        InitialSpec(kind="gaussian")
    with pytest.raises(ConfigError):
        InitialSpec(kind="file")
    base = preset("stable-1d")
    with pytest.raises(ConfigError):
        replace(base, reference="median")
    with pytest.raises(ConfigError):
        replace(base, t_end=-1.0)
    with pytest.raises(ConfigError):
        replace(base, initial=InitialSpec(base=(0.3,)))
    with pytest.raises(ConfigError):
        replace(base, coeffs=((0, -1, 1), (-1, 0, 1), (1, 1, 0)))


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_preset_ini_round_trip(name, tmp_path):
    c = with_overrides(preset(name), output_dir=str(tmp_path / "out %d"))
    assert from_ini(to_ini(c)) == c
    path = save_config(c, tmp_path / "c.ini")
    assert load_config(path) == c


finite = st.floats(1e-6, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def configs(draw):
    dim = draw(st.integers(1, 2))
    cells = tuple(draw(st.integers(1, 50)) for _ in range(dim))
    lengths = tuple(draw(finite) for _ in range(dim))
    k = draw(st.tuples(finite, finite, finite))
    kind = draw(st.sampled_from(["cosine", "random", "constant"]))
    b0 = draw(st.floats(0.01, 0.6))
    initial = InitialSpec(kind=kind, base=(b0, draw(st.floats(0.01, 0.99 - b0))),
                          kappa=draw(st.floats(0, 1)), frequency=draw(st.integers(1, 5)),
                          seed=draw(st.one_of(st.none(), st.integers(0, 2**63))))
    dt_max = draw(finite)
    solver = SolverConfig(newton_tol=draw(finite), newton_max_iter=draw(st.integers(1, 100)),
                          dt_max=dt_max, dt_min=dt_max * draw(st.floats(1e-9, 1)),
                          dt_grow=draw(st.floats(1.01, 3)), dt_shrink=draw(st.floats(0.01, 0.99)))
    return ExperimentConfig(
        name=draw(st.text("abcdefgh-_0123456789", min_size=1, max_size=12)),
        mesh=MeshSpec(cells, lengths), epsilon=draw(finite), beta=draw(st.floats(0, 100)),
        coeffs=three_species_coeffs(*k), initial=initial, solver=solver,
        t_end=draw(st.floats(0, 1e3)),
        snapshots=tuple(draw(st.lists(st.floats(0, 1e3), max_size=5))),
        c_p=draw(finite), c_sob=draw(finite),
        reference=draw(st.sampled_from(["constant", "final"])),
        output_dir=draw(st.one_of(st.none(), st.text("abc/_ %.", min_size=1, max_size=10)
                                  .filter(lambda s: s.strip() == s))),
    )


@settings(max_examples=100, deadline=None)
@given(configs())
def test_ini_round_trip_property(config):
    assert from_ini(to_ini(config)) == config


def test_from_ini_errors():
    with pytest.raises(ConfigError):
        from_ini("[run]\nname = x\n")
    text = to_ini(preset("stable-1d")).replace("epsilon = 4.0", "epsilon = four")
    with pytest.raises(ConfigError):
        from_ini(text)


def test_overrides():
    c = preset("spinodal-2d-small")
    assert with_overrides(c) is c
    o = with_overrides(c, seed=5, t_end=0.1, snapshots=(0.05,), output_dir="d")
    assert (o.initial.seed, o.t_end, o.snapshots, o.output_dir) == (5, 0.1, (0.05,), "d")


# csv files ---------------------------------------------------------------------

@pytest.mark.parametrize("mesh", [build_interval_mesh(7), build_rect_mesh(3, 4)])
def test_snapshot_round_trip_is_exact(mesh, tmp_path):
    rng = np.random.default_rng(0)
    V = rng.random((3, mesh.n_cells))
    V /= V.sum(axis=0)
    path = io.write_snapshot(tmp_path / io.snapshot_name(0.13), mesh, State(V, time=0.13))
    assert path.name == "snapshot_t0.13.csv"
    centers, values = io.read_snapshot(path)
    np.testing.assert_array_equal(values, V)
    np.testing.assert_array_equal(centers, mesh.centers)


def test_snapshot_header(tmp_path):
    mesh = build_rect_mesh(2, 2)
    path = io.write_snapshot(tmp_path / "s.csv", mesh, State(np.full((3, 4), 1 / 3)))
    assert path.read_text().splitlines()[0] == "cell_id,x,y,u_0,u_1,u_2"


def test_read_snapshot_rejects_other_files(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        io.read_snapshot(p)


def test_file_initial_data(tmp_path):
    mesh = build_interval_mesh(6)
    V = np.array([[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.3] * 6, [0.6, 0.5, 0.4, 0.3, 0.2, 0.1]])
    path = io.write_snapshot(tmp_path / "s.csv", mesh, State(V))
    c = ExperimentConfig(name="f", mesh=MeshSpec((6,), (1.0,)), epsilon=1.0, beta=1.0,
                         coeffs=three_species_coeffs(0.2, 1.0, 0.1),
                         initial=InitialSpec(kind="file", path=str(path)))
    U = build_initial(c, mesh)
    np.testing.assert_allclose(U.values, V, atol=1e-15)
    with pytest.raises(ConfigError):
        build_initial(c, build_interval_mesh(5))


def test_series_round_trip(tmp_path):
    mesh = build_interval_mesh(4)
    p = ModelParams(1.0, 1.0, three_species_coeffs(0.2, 1.0, 0.1))
    V = np.array([[0.2, 0.3, 0.25, 0.25], [0.3, 0.3, 0.25, 0.2], [0.5, 0.4, 0.5, 0.55]])
    diags = [check_step(mesh, p, None, State(V), 0.0),
             check_step(mesh, p, State(V), State(V, time=0.25), 0.25, step=1)]
    path = io.write_series(tmp_path / "series.csv", diags, 3, relative_energy=[2.0, 1.0])
    cols = io.read_series(path)
    assert list(cols) == io.series_header(3)
    np.testing.assert_array_equal(cols["time"], [0.0, 0.25])
    np.testing.assert_array_equal(cols["E_total"], [d.e_total for d in diags])
    np.testing.assert_array_equal(cols["RE"], [2.0, 1.0])
    np.testing.assert_array_equal(cols["mass_2"], [d.masses[2] for d in diags])
    assert np.isnan(cols["dissipation"][0])


def test_inline_comments_are_ignored():
    text = to_ini(preset("stable-1d")).replace("reference = constant",
                                               "reference = constant   ; or: final")
    assert from_ini(text) == preset("stable-1d")
