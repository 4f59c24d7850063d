"""Command line entry point.

Exit codes: 0 success, 1 usage or input error, 2 solver failure, 3 invariant
violation found by ``verify``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import (
    ConfigError,
    ExperimentConfig,
    build_initial,
    load_config,
    preset,
    save_config,
    with_overrides,
)
from .diagnostics import Thresholds
from .model import constant_steady_state, discrete_energy, stability_report
from .scheme import SolverAbort, run
from .stationary import StationaryFailure, solve_stationary

log = logging.getLogger("crossdiff_ch")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_VIOLATION = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _time_list(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of times: {text!r}") from None


def _add_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", metavar="NAME", help="named experiment")
    src.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--seed", type=int, help="seed for random initial data")
    p.add_argument("--t-end", type=float, help="final time")
    p.add_argument("--snapshots", type=_time_list, metavar="T1,T2,...",
                   help="times at which to store the state")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crossdiff-ch",
                     description="Finite volume simulation of a cross-diffusion Cahn-Hilliard system.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate and write series.csv and snapshots")
    _add_source(p)
    p.add_argument("--out", metavar="DIR", help="output directory")

    p = sub.add_parser("stationary", help="solve for a critical point of the energy")
    _add_source(p)
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--guess", metavar="SNAPSHOT", help="snapshot CSV used as the initial guess")
    p.add_argument("--tol", type=float, default=1e-10, help="residual tolerance")

    p = sub.add_parser("verify", help="re-check invariants of a stored run")
    p.add_argument("--out", metavar="DIR", required=True, help="directory written by 'run'")
    p.add_argument("--mass-tol", type=float, default=Thresholds.mass_drift)
    p.add_argument("--volume-tol", type=float, default=Thresholds.volume_filling)
    p.add_argument("--energy-tol", type=float, default=Thresholds.energy_slack)

    p = sub.add_parser("report", help="print the stability report of a configuration")
    _add_source(p)
    return parser


def _load(args) -> ExperimentConfig:
    config = preset(args.preset) if args.preset else load_config(args.config)
    return with_overrides(config, seed=args.seed, t_end=args.t_end, snapshots=args.snapshots,
                          output_dir=getattr(args, "out", None))


def _output_dir(config: ExperimentConfig) -> Path:
    if not config.output_dir:
        raise ConfigError("no output directory: pass --out or set run.output_dir")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _setup(config: ExperimentConfig):
    mesh = config.mesh.build()
    initial = build_initial(config, mesh)
    params = config.params().with_masses(mesh.integrate(initial.values))
    return mesh, initial, params


def cmd_run(args) -> int:
    config = _load(args)
    out = _output_dir(config)
    mesh, initial, params = _setup(config)
    save_config(config, out / "config.ini")
    reference = constant_steady_state(mesh, params) if config.reference == "constant" else None

    def progress(diag, state):
        if diag.step % 500 == 0:
            log.info("step %d  t = %.6g  E = %.12g", diag.step, diag.time, diag.e_total)

    # the initial and final states are always kept
    snapshot_times = sorted(set(config.snapshots) | {initial.time, config.t_end})
    try:
        traj = run(initial, mesh, params, config.solver, config.t_end,
                   snapshot_times=snapshot_times, reference=reference, on_step=progress)
    except SolverAbort as exc:
        print(f"solver aborted: {exc} (residual {exc.residual_norm:.3e})", file=sys.stderr)
        return EXIT_SOLVER

    diags = traj.diagnostics
    re = None
    if config.reference == "final":
        e_final = diags[-1].e_total
        re = [d.e_total - e_final for d in diags]
    io.write_series(out / "series.csv", diags, params.n_species, re)
    for t, state in sorted(traj.snapshots.items()):
        io.write_snapshot(out / io.snapshot_name(t), mesh, state)

    last = diags[-1]
    n_bad = sum(1 for d in diags if d.violations)
    print(f"steps = {last.step}")
    print(f"t = {last.time:.17g}")
    print(f"E_total = {last.e_total:.17g}")
    print(f"min_u = {last.min_u:.17g}")
    print(f"steps_with_violations = {n_bad}")
    return EXIT_OK


def cmd_stationary(args) -> int:
    config = _load(args)
    out = _output_dir(config)
    mesh, initial, params = _setup(config)
    if args.guess:
        _, values = io.read_snapshot(args.guess)
        if values.shape[1] != mesh.n_cells:
            raise ConfigError(f"{args.guess}: {values.shape[1]} cells, mesh has {mesh.n_cells}")
        guess = values[0]
        params = params.with_masses(mesh.integrate(values))
    else:
        guess = initial.values[0]
    guess = np.clip(guess, 1e-6, 1 - 1e-6)
    try:
        sol = solve_stationary(mesh, params, float(params.masses[0]), guess, tol=args.tol)
    except StationaryFailure as exc:
        print(f"stationary solve failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    io.write_snapshot(out / "stationary.csv", mesh, sol.species)
    energy = discrete_energy(mesh, sol.species, params)
    text = (f"lambda0 = {sol.multiplier:.17g}\n"
            f"residual_norm = {sol.residual_norm:.17g}\n"
            f"delta = {sol.delta:.17g}\n"
            f"E_total = {energy.e_total:.17g}\n"
            f"iterations = {sol.iterations}\n")
    (out / "stationary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def verify_directory(out: Path, thresholds: Thresholds) -> list[str]:
    """Invariant violations found in the files of a finished run."""
    series_path = out / "series.csv"
    if not series_path.exists():
        raise ConfigError(f"{series_path} not found")
    cols = io.read_series(series_path)
    problems = []
    masses = np.array([cols[k] for k in cols if k.startswith("mass_")])
    drift = np.max(np.abs(masses - masses[:, :1]), axis=0)
    for n in np.flatnonzero(drift > thresholds.mass_drift):
        problems.append(f"row {n}: mass drift {drift[n]:.3e}")
    for n in np.flatnonzero(~(cols["min_u"] > 0)):
        problems.append(f"row {n}: min_u = {cols['min_u'][n]:.3e}")
    diss = cols["dissipation"][1:]
    for n in np.flatnonzero(~(diss >= 0)):
        problems.append(f"row {n + 1}: dissipation = {diss[n]:.3e}")
    e = cols["E_total"]
    slack = e[1:] - e[:-1] + cols["dt"][1:] * diss
    tol = thresholds.energy_slack * (1 + np.abs(e[:-1]))
    for n in np.flatnonzero(~(slack <= tol)):
        problems.append(f"row {n + 1}: energy inequality slack {slack[n]:.3e}")
    for path in sorted(out.glob("snapshot_t*.csv")):
        _, values = io.read_snapshot(path)
        defect = float(np.max(np.abs(values.sum(axis=0) - 1)))
        if defect > thresholds.volume_filling:
            problems.append(f"{path.name}: volume-filling defect {defect:.3e}")
    return problems


def cmd_verify(args) -> int:
    thresholds = Thresholds(args.mass_tol, args.volume_tol, args.energy_tol)
    problems = verify_directory(Path(args.out), thresholds)
    for line in problems:
        print(line)
    print("verify: " + ("ok" if not problems else f"{len(problems)} violation(s)"))
    return EXIT_VIOLATION if problems else EXIT_OK


def cmd_report(args) -> int:
    config = _load(args)
    mesh, _, params = _setup(config)
    report = stability_report(params, mesh.domain_measure, config.c_p, config.c_sob)
    print(report.to_text(), end="")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "stationary": cmd_stationary, "verify": cmd_verify, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError) as exc:
        print(f"crossdiff-ch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
