"""Command-line front end: ``harmap-dn <command> --config FILE``.

Exit codes: 0 success, 2 configuration or usage error, 3 solver failure,
4 noise-floor abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, boundary_function
from .dnmap import DNOracle, dn_evaluate, dn_from_energy, energy_first_variation
from .errors import (ConfigError, HarmapError, NoConvergenceError, NoiseFloorError,
                     RangeEscapeError, SolverFailureError, StepTooLargeError)
from .forward import ForwardProblem, NewtonControls, dirichlet_energy, solve
from .grid import EDGES, GridDomain, boundary_geometry, integrate_boundary, lumped_nodal
from .identities import (IdentityReport, observed_order, reports_to_csv, verify_alessandrini,
                         verify_nth_identity, verify_third_identity)
from .linearize import SlotSpec, build_table, jet_at
from .reconstruct import ground_truth, reconstruct

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_NOISE = 0, 2, 3, 4
SOLVER_ERRORS = (NoConvergenceError, SolverFailureError, RangeEscapeError, StepTooLargeError)
COMMANDS = ("forward", "dn", "linearize", "verify", "reconstruct", "energy", "convergence")


# ---------------------------------------------------------------------------
# output


class Writer:
    """Writes stamped, deterministic output files into one directory."""

    def __init__(self, out: Path, cfg: ExperimentConfig, command: str):
        self.out = Path(out)
        self.cfg = cfg
        self.command = command
        self.written: list = []

    @property
    def stamp(self) -> dict:
        return {"command": self.command, "config_hash": self.cfg.hash, "version": __version__}

    def _write(self, name: str, text: str):
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text)
        self.written.append(path)
        return path

    def json(self, name: str, payload: dict):
        body = dict(self.stamp, **payload)
        return self._write(name, json.dumps(body, sort_keys=True, indent=1) + "\n")

    def csv(self, name: str, header, rows):
        buf = io.StringIO()
        buf.write(f"# config_hash={self.cfg.hash} version={__version__}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return self._write(name, buf.getvalue())

    def csv_text(self, name: str, text: str):
        return self._write(name, f"# config_hash={self.cfg.hash} version={__version__}\n" + text)

    def dat(self, name: str, header, rows):
        lines = [f"# config_hash={self.cfg.hash} version={__version__}",
                 "# " + " ".join(header)]
        lines += [" ".join(f"{v:.12e}" if isinstance(v, float) else str(v) for v in row)
                  for row in rows]
        return self._write(name, "\n".join(lines) + "\n")


def _edges_dict(values) -> dict:
    return {edge: np.asarray(values)[:, e].tolist() for e, edge in enumerate(EDGES)}


def _finite(x: float):
    return float(x) if np.isfinite(x) else None


# ---------------------------------------------------------------------------
# problem construction


def _controls(cfg: ExperimentConfig) -> NewtonControls:
    kwargs = {}
    if "tol" in cfg.raw:
        kwargs["tol"] = cfg.raw["tol"]
    if "continuation_steps" in cfg.raw:
        kwargs["continuation_steps"] = cfg.raw["continuation_steps"]
    return NewtonControls(**kwargs)


def _problem(cfg: ExperimentConfig, n_cells: int, h=None, boundary: bool = True):
    grid = GridDomain(n_cells)
    h = cfg.target_metric() if h is None else h
    f = 0.0
    if boundary and "boundary" in cfg.raw:
        f = cfg.get("amplitude", 1.0) * cfg.directions("boundary", grid, h.n)
    return ForwardProblem(cfg.domain_metric(), h, grid, cfg.q, f)


# ---------------------------------------------------------------------------
# commands


def cmd_forward(cfg: ExperimentConfig, w: Writer, jobs: int = 1) -> dict:
    """Solve the Dirichlet problem and report energy and Newton history."""
    runs = []
    for n_cells in cfg.grids:
        problem = _problem(cfg, n_cells)
        state, report = solve(problem, _controls(cfg))
        run = {"n_cells": n_cells, "energy": dirichlet_energy(state.displacement, problem,
                                                              displacement=True),
               "newton": report.to_dict()}
        runs.append(run)
        if cfg.get("dump_solution", False):
            w.json(f"solution_n{n_cells}.json",
                   {"n_cells": n_cells, "coords": problem.grid.coords.tolist(),
                    "values": state.values.tolist()})
    payload = {"runs": runs}
    w.json("forward.json", payload)
    return payload


def cmd_dn(cfg: ExperimentConfig, w: Writer, jobs: int = 1) -> dict:
    """Evaluate the nonlinear DN map for the configured boundary data."""
    runs = []
    for n_cells in cfg.grids:
        problem = _problem(cfg, n_cells)
        sample = dn_evaluate(problem.boundary_data, problem, _controls(cfg))
        runs.append({"n_cells": n_cells, "values": _edges_dict(sample.values),
                     "newton": sample.report.to_dict()})
    payload = {"runs": runs}
    w.json("dn.json", payload)
    return payload


def cmd_linearize(cfg: ExperimentConfig, w: Writer, jobs: int = 1) -> dict:
    """Build the linearization table for the configured slots."""
    order = cfg.get("linearization_order", 2)
    rows, runs = [], []
    for n_cells in cfg.grids:
        problem = _problem(cfg, n_cells, boundary=False)
        spec = _slots(cfg, problem, None)
        jet = jet_at(problem.h, problem.q_array, max(order - 2, 0))
        table = build_table(spec, order, problem.g, problem.grid, jet, jobs=jobs)
        entries = {}
        for size in range(1, order + 1):
            for T in table.subsets(size):
                key = "".join(map(str, sorted(T)))
                norm = float(np.abs(table[T]).max())
                entries[key] = norm
                rows.append((n_cells, key, norm))
        runs.append({"n_cells": n_cells, "max_norms": entries})
    payload = {"order": order, "slots": cfg.slot_names(), "runs": runs}
    w.json("linearize.json", payload)
    w.csv("linearize.csv", ("n_cells", "slots", "max_norm"), rows)
    return payload


def _slots(cfg: ExperimentConfig, problem: ForwardProblem, count: int | None) -> SlotSpec:
    dirs = cfg.slot_arrays(problem.grid, problem.n)
    names = cfg.slot_names()
    if count is not None:
        if len(dirs) < count:
            raise ConfigError(f"this identity needs {count} slots, config has {len(dirs)}")
        dirs, names = dirs[:count], names[:count]
    return SlotSpec(dirs, names)


def _run_identity(name: str, cfg: ExperimentConfig, n_cells: int, jobs: int) -> IdentityReport:
    problem = _problem(cfg, n_cells, boundary=False)
    controls = _controls(cfg)
    delta = cfg.get("delta")
    if name.startswith("alessandrini"):
        k = int(name[-1])
        spec = _slots(cfg, problem, k + 3)
        other = _problem(cfg, n_cells, h=cfg.other_target_metric(), boundary=False)
        return verify_alessandrini(k, problem, other, spec, delta, controls, jobs,
                                   check_jets=cfg.get("check_jets", True))
    if name == "order3-cyclic":
        return verify_third_identity(_slots(cfg, problem, 4), problem, delta, controls, jobs)
    N = int(name[-1])
    return verify_nth_identity(N, _slots(cfg, problem, N + 1), problem, delta, controls, jobs)


def cmd_verify(cfg: ExperimentConfig, w: Writer, jobs: int = 1) -> dict:
    """Check integral identities and report residuals per grid."""
    names = cfg.get("identities") or ["order2", "order3", "order4"]
    reports, rows = [], []
    for name in names:
        mine = [_run_identity(name, cfg, n_cells, jobs) for n_cells in cfg.grids]
        reports += mine
        for prev, cur in zip([None] + mine[:-1], mine):
            order = (observed_order(prev.rel_residual, cur.rel_residual,
                                    cur.n_cells / prev.n_cells) if prev else float("nan"))
            rows.append((name, cur.n_cells, cur.delta, cur.lhs, cur.rhs, cur.abs_residual,
                         cur.rel_residual, _finite(order)))
    payload = {"reports": [r.to_dict() for r in reports],
               "table": [dict(zip(("identity", "n_cells", "delta", "lhs", "rhs", "abs_residual",
                                   "rel_residual", "observed_order"), row)) for row in rows]}
    w.json("verify.json", payload)
    w.csv("verify.csv", ("identity", "n_cells", "delta", "lhs", "rhs", "abs_residual",
                         "rel_residual", "observed_order"),
          [tuple("" if v is None else v for v in row) for row in rows])
    w.csv_text("verify_reports.csv", reports_to_csv(reports))
    return payload


def cmd_reconstruct(cfg: ExperimentConfig, w: Writer, jobs: int = 1) -> dict:
    """Recover the Christoffel and metric jets at q from DN data."""
    order = cfg.get("jet_order", 1)
    amplitude = cfg.get("C", 1.0)
    delta = cfg.get("delta", 1e-3)
    probe_spec = cfg.get("probe", "x")
    results, rows = [], []
    probe_fn = boundary_function(probe_spec)
    for n_cells in cfg.grids:
        problem = _problem(cfg, n_cells, boundary=False)
        oracle = DNOracle(problem, _controls(cfg))
        coarse = coarse_probe = None
        if cfg.get("error_estimate", False):
            cp = _problem(cfg, n_cells // 2, boundary=False)
            coarse = DNOracle(cp, _controls(cfg))
            coarse_probe = cp.grid.sample_boundary(probe_fn)
        truth = ground_truth(problem.h, problem.q, order)
        res = reconstruct(oracle, problem.grid.sample_boundary(probe_fn), order, amplitude,
                          delta, coarse, coarse_probe, truth, jobs, problem.g)
        res.provenance["probe"] = str(probe_spec)
        results.append(res.to_dict())
        rows += [(n_cells,) + row for row in res.comparison_rows()]
    payload = {"results": results}
    w.json("reconstruct.json", payload)
    w.csv("reconstruct.csv", ("n_cells", "quantity", "index", "recovered", "error_estimate",
                              "truth"), rows)
    return payload


def cmd_energy(cfg: ExperimentConfig, w: Writer, jobs: int = 1) -> dict:
    """Compare energy variations with the boundary pairing of the DN map."""
    t = cfg.get("t", 1e-3)
    mode = cfg.get("energy_mode", "pairing")
    runs = []
    for n_cells in cfg.grids:
        problem = _problem(cfg, n_cells)
        f = problem.boundary_data
        run = {"n_cells": n_cells}
        if "variation" in cfg.raw:
            phi = cfg.directions("variation", problem.grid, problem.n)
            var = energy_first_variation(f, phi, problem, t, _controls(cfg))
            run.update({"centered": var.centered, "pairing": var.pairing,
                        "relative_mismatch": var.relative_mismatch, "t": t})
        rec = dn_from_energy(f, problem, mode, controls=_controls(cfg))
        direct = lumped_nodal(dn_evaluate(f, problem, _controls(cfg)).values,
                              boundary_geometry(problem.g, problem.grid))
        diff = float(np.abs(rec.values - direct).max())
        scale = max(float(np.abs(direct).max()), 1e-14)
        run.update({"mode": mode, "dn_max_discrepancy": diff,
                    "dn_relative_discrepancy": diff / scale, "condition": rec.condition})
        runs.append(run)
    payload = {"runs": runs}
    w.json("energy.json", payload)
    return payload


def cmd_convergence(cfg: ExperimentConfig, w: Writer, jobs: int = 1) -> dict:
    """Grid sweep of the energy and boundary flux of the forward solution."""
    rows = []
    for n_cells in sorted(cfg.grids):
        problem = _problem(cfg, n_cells)
        state, report = solve(problem, _controls(cfg))
        energy = dirichlet_energy(state.displacement, problem, displacement=True)
        flux = integrate_boundary(state.normal_derivative, problem.g, problem.grid)
        rows.append({"n_cells": n_cells, "h": problem.grid.spacing, "energy": energy,
                     "flux_norm": float(np.abs(flux).max()),
                     "iterations": report.iterations})
    for i, row in enumerate(rows):
        if i + 1 < len(rows):
            row["energy_change"] = abs(rows[i + 1]["energy"] - row["energy"])
    for i in range(1, len(rows) - 1):
        a, b = rows[i - 1].get("energy_change"), rows[i].get("energy_change")
        ratio = rows[i]["n_cells"] / rows[i - 1]["n_cells"]
        rows[i]["observed_order"] = _finite(observed_order(a, b, ratio)) if b is not None else None
    header = ("n_cells", "h", "energy", "flux_norm", "energy_change", "observed_order")
    table = [tuple(r.get(k) if r.get(k) is not None else float("nan") for k in header)
             for r in rows]
    w.json("convergence.json", {"rows": rows})
    w.csv("convergence.csv", header, table)
    w.dat("convergence.dat", header,
          [tuple(float(v) if k != "n_cells" else v for k, v in zip(header, row))
           for row in table])
    return {"rows": rows}


HANDLERS = {"forward": cmd_forward, "dn": cmd_dn, "linearize": cmd_linearize,
            "verify": cmd_verify, "reconstruct": cmd_reconstruct, "energy": cmd_energy,
            "convergence": cmd_convergence}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harmap-dn",
                                     description="Harmonic-map DN experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).split("\n")[0])
        p.add_argument("--config", required=True, type=Path, help="JSON experiment file")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
        p.add_argument("--grid", type=int, help="override the grid size")
        p.add_argument("--delta", type=float, help="override the difference step")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = ExperimentConfig.load(args.config, args.grid, args.delta)
    except HarmapError as exc:
        print(f"harmap-dn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path(cfg.get("output", "results"))
    writer = Writer(out, cfg, args.command)
    try:
        HANDLERS[args.command](cfg, writer, max(1, args.jobs))
    except NoiseFloorError as exc:
        print(f"harmap-dn: noise floor: {exc}", file=sys.stderr)
        return EXIT_NOISE
    except SOLVER_ERRORS as exc:
        print(f"harmap-dn: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (HarmapError, ValueError) as exc:
        print(f"harmap-dn: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in writer.written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
