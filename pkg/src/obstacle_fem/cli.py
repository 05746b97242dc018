"""Command line driver: ``obstacle-fem <solve|converge|adapt|check> --config FILE``.

Exit codes: 0 success, 1 configuration error, 2 solver non-convergence,
3 property-check failure.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .assembly import assemble_mixed, assemble_stabilized, default_alpha, inverse_constant
from .benchmark import (
    MethodSpec,
    StudyError,
    adaptive_study,
    build_exact_solution,
    convergence_study,
    infsup_diagnostic,
    initial_mesh,
    solve_level,
    level_row,
)
from .estimator import local_indicator
from .fespace import MULTIPLIER_SPACE, displacement_space, quadrature_rule
from .mesh import generate_disk_mesh, refine_uniform
from .output import CSV_COLUMNS, gnuplot_script, write_csv, write_vtk
from .linalg import SolverError
from .solver import kkt_check

log = logging.getLogger("obstacle_fem")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_CHECK = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "method": "stabilized",
    "degree": 1,
    "alpha": None,
    "mesh": {"family": "nonconforming", "initial_h": 0.5, "levels": 1},
    "solver": {"c": 1.0, "tol": 1e-10, "max_iter": 100, "linear": "cg"},
    "theta": 0.9,
    "max_dofs": 30000,
    "output": None,
}


@dataclass
class RunConfig:
    method: str = "stabilized"
    degree: int = 1
    alpha: Optional[float] = None
    mesh: dict = field(default_factory=lambda: dict(DEFAULTS["mesh"]))
    solver: dict = field(default_factory=lambda: dict(DEFAULTS["solver"]))
    theta: float = 0.9
    max_dofs: int = 30000
    output: Optional[str] = None

    def method_spec(self) -> MethodSpec:
        return MethodSpec(
            method=self.method,
            degree=self.degree,
            alpha=self.alpha,
            c=self.solver["c"],
            tol=self.solver["tol"],
            max_iter=self.solver["max_iter"],
            linear_solver=self.solver["linear"],
        )

    def digest(self) -> str:
        d = asdict(self)
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _num(value, name, kind=float, positive=False, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"field '{name}': expected a number, got {value!r}")
    if kind is int and float(value) != int(value):
        raise ConfigError(f"field '{name}': expected an integer, got {value!r}")
    value = kind(value)
    if positive and not value > 0:
        raise ConfigError(f"field '{name}': must be positive, got {value!r}")
    return value


def _merge(name, given, defaults):
    if not isinstance(given, dict):
        raise ConfigError(f"field '{name}': expected an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"field '{name}.{unknown[0]}': unknown key")
    out = dict(defaults)
    out.update(given)
    return out


def parse_config(raw: dict) -> RunConfig:
    """Validate a configuration document; raises ConfigError naming the field."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"field '{unknown[0]}': unknown key")
    cfg = copy.deepcopy(DEFAULTS)
    cfg.update({k: v for k, v in raw.items() if k not in ("mesh", "solver")})
    cfg["mesh"] = _merge("mesh", raw.get("mesh", {}), DEFAULTS["mesh"])
    cfg["solver"] = _merge("solver", raw.get("solver", {}), DEFAULTS["solver"])

    if cfg["method"] not in ("mixed", "stabilized", "nitsche"):
        raise ConfigError(f"field 'method': must be one of mixed, stabilized, nitsche; got {cfg['method']!r}")
    degree = _num(cfg["degree"], "degree", int)
    if degree not in (1, 2):
        raise ConfigError(f"field 'degree': must be 1 or 2, got {degree}")
    alpha = _num(cfg["alpha"], "alpha", allow_none=True)
    if cfg["method"] == "mixed":
        alpha = None
    elif alpha is None:
        alpha = default_alpha(degree)
    elif not alpha > 0:
        raise ConfigError(f"field 'alpha': must be positive for method {cfg['method']}, got {alpha}")
    mesh = cfg["mesh"]
    if mesh["family"] not in ("conforming", "nonconforming"):
        raise ConfigError(f"field 'mesh.family': must be conforming or nonconforming, got {mesh['family']!r}")
    mesh["initial_h"] = _num(mesh["initial_h"], "mesh.initial_h", positive=True)
    mesh["levels"] = _num(mesh["levels"], "mesh.levels", int)
    if mesh["levels"] < 1:
        raise ConfigError(f"field 'mesh.levels': must be at least 1, got {mesh['levels']}")
    sol = cfg["solver"]
    sol["c"] = _num(sol["c"], "solver.c", positive=True)
    sol["tol"] = _num(sol["tol"], "solver.tol", positive=True)
    sol["max_iter"] = _num(sol["max_iter"], "solver.max_iter", int, positive=True)
    if sol["linear"] not in ("cg", "direct", "cg-strict"):
        raise ConfigError(f"field 'solver.linear': must be cg, direct or cg-strict, got {sol['linear']!r}")
    theta = _num(cfg["theta"], "theta")
    if not 0 < theta <= 1:
        raise ConfigError(f"field 'theta': must lie in (0, 1], got {theta}")
    max_dofs = _num(cfg["max_dofs"], "max_dofs", int, positive=True)
    out = cfg["output"]
    if out is not None and not isinstance(out, str):
        raise ConfigError("field 'output': expected a string")
    return RunConfig(cfg["method"], degree, alpha, mesh, sol, theta, max_dofs, out)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(raw)


# --------------------------------------------------------------------------
# helpers


def _row_dict(row) -> dict:
    d = asdict(row)
    d["ndof_total"] = row.ndof_total
    return d


def _write_fields(outdir: Path, tag: str, mesh, sol, spec, data) -> None:
    V = spec.V
    u = sol.u_full[: mesh.nvertices]
    E = local_indicator(sol, mesh, V, data)
    write_vtk(outdir / f"u{tag}.vtk", mesh, point_data={"u": u}, title="displacement")
    write_vtk(outdir / f"lambda{tag}.vtk", mesh, cell_data={"lambda": sol.lam, "E_K": E}, title="multiplier and indicator")


def _report_entry(level, sol) -> dict:
    r = sol.report
    return {
        "level": level,
        "converged": bool(r.converged),
        "iterations": int(r.iterations),
        "lambda_update_norms": [float(x) for x in r.lambda_update_norms],
        "active_set_sizes": [int(x) for x in r.active_set_sizes],
        "linear_solves": int(r.linear.solves),
        "linear_iterations": int(r.linear.iterations),
        "direct_fallbacks": int(r.direct_fallbacks),
        "message": r.message,
    }


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _outdir(cfg: RunConfig, override: Optional[str], command: str) -> Path:
    d = Path(override or cfg.output or f"obstacle-{command}-{cfg.digest()}")
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------
# subcommands


def run_solve(cfg: RunConfig, outdir: Path) -> int:
    spec = cfg.method_spec()
    exact = build_exact_solution()
    mesh = initial_mesh(cfg.mesh["family"], cfg.mesh["initial_h"], exact)
    for _ in range(cfg.mesh["levels"] - 1):
        mesh = refine_uniform(mesh)
    sol, sys_, data = solve_level(spec, mesh)
    row = level_row(cfg.mesh["levels"] - 1, spec, mesh, sol, sys_, data, exact)
    _write_fields(outdir, "", mesh, sol, spec, data)
    write_csv(outdir / "table.csv", [_row_dict(row)])
    _dump_json(outdir / "report.json", {"config": asdict(cfg), "levels": [_report_entry(row.level, sol)], "version": __version__})
    if not sol.report.converged:
        log.error("solver did not converge: %s", sol.report.message)
        return EXIT_SOLVER
    return EXIT_OK


def _emit_table(cfg, outdir, table, title):
    spec = cfg.method_spec()
    for i, (mesh, sol) in enumerate(zip(table.meshes, table.solutions)):
        data = _data_for(spec)
        _write_fields(outdir, f"_L{i}", mesh, sol, spec, data)
    write_csv(outdir / "table.csv", [_row_dict(r) for r in table.rows])
    (outdir / "plot.gp").write_text(gnuplot_script("table.csv", title))
    _dump_json(
        outdir / "report.json",
        {"config": asdict(cfg), "levels": [_report_entry(i, s) for i, s in enumerate(table.solutions)], "version": __version__},
    )


def _data_for(spec):
    from .benchmark import problem_data

    return problem_data(spec.degree, spec.alpha)


def run_converge(cfg: RunConfig, outdir: Path) -> int:
    spec = cfg.method_spec()
    table = convergence_study(spec, cfg.mesh["family"], cfg.mesh["levels"], cfg.mesh["initial_h"], keep=True)
    _emit_table(cfg, outdir, table, f"uniform refinement, {cfg.method} P{cfg.degree}-P0")
    return EXIT_OK


def run_adapt(cfg: RunConfig, outdir: Path) -> int:
    if cfg.method != "stabilized":
        raise ConfigError("field 'method': adapt requires the stabilized method")
    spec = cfg.method_spec()
    table = adaptive_study(spec, cfg.theta, cfg.max_dofs, cfg.mesh["initial_h"], cfg.mesh["family"], keep=True)
    _emit_table(cfg, outdir, table, f"adaptive refinement, theta={cfg.theta}, P{cfg.degree}-P0")
    return EXIT_OK


def _monomial_integral(a: int, b: int) -> float:
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)


def run_check(cfg: RunConfig, outdir: Path) -> int:
    """Property checks on the configured method; prints one line per check."""
    results = []

    def record(name, ok, value="", severity="error"):
        results.append({"check": name, "ok": bool(ok), "value": value, "severity": severity})

    # quadrature exactness
    for order in range(1, 7):
        rule = quadrature_rule(order)
        x, y = rule.xy[:, 0], rule.xy[:, 1]
        err = max(
            abs(np.sum(rule.weights * x**a * y**b) - _monomial_integral(a, b))
            for a in range(order + 1)
            for b in range(order + 1 - a)
        )
        record(f"quadrature order {order}", err <= 1e-14, f"{err:.3e}")

    spec = cfg.method_spec()
    exact = build_exact_solution()
    mesh = initial_mesh(cfg.mesh["family"], cfg.mesh["initial_h"], exact)
    for _ in range(cfg.mesh["levels"] - 1):
        mesh = refine_uniform(mesh)
    problems = mesh.audit()
    record("mesh audit", not problems, "; ".join(problems))

    # assembly determinism
    data = _data_for(spec)
    asm = assemble_mixed if cfg.method == "mixed" else assemble_stabilized
    if cfg.method != "nitsche":
        s1, s2 = asm(mesh, spec.V, MULTIPLIER_SPACE, data), asm(mesh, spec.V, MULTIPLIER_SPACE, data)
        same = all(_bit_equal(getattr(s1, n), getattr(s2, n)) for n in ("A", "B", "f", "g"))
        record("assembly determinism", same)

    sol, sys_, data = solve_level(spec, mesh)
    record("solver convergence", sol.report.converged, f"{sol.report.iterations} iterations")
    if cfg.method != "nitsche":
        kkt = kkt_check(sol, sys_)
        record("KKT dual feasibility", kkt.dual_violation <= 1e-12, f"{kkt.dual_violation:.3e}")
        record("KKT primal feasibility", kkt.primal_violation <= 1e-9 * kkt.scale, f"{kkt.primal_violation:.3e}")
        record("KKT complementarity", kkt.complementarity <= 1e-9 * kkt.scale, f"{kkt.complementarity:.3e}")
    else:
        record("multiplier nonnegative", np.all(sol.lam >= 0))

    small = mesh if _free_dofs(mesh, spec) <= 400 else generate_disk_mesh(2.0, 1.0)
    if cfg.method != "mixed":
        c_inv = inverse_constant(small, spec.V)
        warn = cfg.alpha >= c_inv
        record(
            "alpha range",
            not warn,
            f"alpha={cfg.alpha:g}, C_I estimate {c_inv:.4g}" + (" (alpha >= C_I: A_alpha may be indefinite)" if warn else ""),
            severity="warning",
        )
    else:
        beta = infsup_diagnostic(small, spec.V)
        record("inf-sup constant (bubble pair)", beta > 0, f"beta_h={beta:.6g} on {small.nelements} elements")
        beta0 = infsup_diagnostic(small, displacement_space(cfg.degree))
        record("inf-sup constant (no bubbles)", True, f"beta_h={beta0:.6g} (diagnostic only)", severity="info")

    failed = [r for r in results if not r["ok"] and r["severity"] == "error"]
    for r in results:
        status = "ok" if r["ok"] else ("WARN" if r["severity"] == "warning" else "FAIL")
        print(f"[{status}] {r['check']}" + (f": {r['value']}" if r["value"] else ""))
    _dump_json(outdir / "check.json", {"config": asdict(cfg), "checks": results, "passed": not failed})
    return EXIT_CHECK if failed else EXIT_OK


def _bit_equal(a, b) -> bool:
    if hasattr(a, "indptr"):
        return all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("data", "indices", "indptr"))
    return np.array_equal(a, b)


def _free_dofs(mesh, spec) -> int:
    from .fespace import build_dofmap

    return build_dofmap(mesh, spec.V).nfree + mesh.nelements


COMMANDS = {"solve": run_solve, "converge": run_converge, "adapt": run_adapt, "check": run_check}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="obstacle-fem", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON configuration file")
    p.add_argument("--out", default=None, help="output directory (default derived from the config hash)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        outdir = _outdir(cfg, args.out, args.command)
        return COMMANDS[args.command](cfg, outdir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StudyError, SolverError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
