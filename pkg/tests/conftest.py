"""Shared helpers: preset runs are cached so several test modules can reuse them."""

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import pytest

from crossdiff_ch.config import build_initial, preset
from crossdiff_ch.mesh import Mesh
from crossdiff_ch.model import ModelParams, constant_steady_state
from crossdiff_ch.scheme import Trajectory, run


@dataclass
class PresetRun:
    mesh: Mesh
    params: ModelParams
    trajectory: Trajectory


def setup_preset(name: str):
    config = preset(name)
    mesh = config.mesh.build()
    initial = build_initial(config, mesh)
    params = config.params().with_masses(mesh.integrate(initial.values))
    return config, mesh, initial, params


@lru_cache(maxsize=None)
def preset_run(name: str, t_end: Optional[float] = None) -> PresetRun:
    config, mesh, initial, params = setup_preset(name)
    reference = constant_steady_state(mesh, params) if config.reference == "constant" else None
    t_end = config.t_end if t_end is None else t_end
    traj = run(initial, mesh, params, config.solver, t_end,
               snapshot_times=config.snapshots, reference=reference)
    return PresetRun(mesh, params, traj)


@pytest.fixture(scope="session")
def run_preset():
    return preset_run


ACCEPTANCE_LINES: list = []


def record(criterion: int, ok: bool, detail: str) -> None:
    """Log one acceptance verdict and fail the calling test if it is negative."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
