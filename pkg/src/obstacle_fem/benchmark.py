"""Radially symmetric benchmark on the disk of radius 2, error norms and studies.

Data: ``f = -1``, homogeneous Dirichlet data on ``r = 2`` and the obstacle
``g = sqrt(1 - r^2)`` for ``r < 0.9`` continued linearly (C^1) beyond. Outside
the contact disk ``r < a`` the solution solves ``-u'' - u'/r = -1`` with
``u(2) = 0``, giving ``u = r^2/4 - 1 + C1 log(r/2)``; matching value and slope
at ``r = a`` fixes ``C1`` and ``a``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import (
    ElementTables,
    ProblemData,
    assemble_mixed,
    assemble_stabilized,
    default_alpha,
    mass_matrix,
    spaces_for,
)
from .fespace import MULTIPLIER_SPACE, SpaceSpec, build_dofmap
from .mesh import Mesh, generate_disk_mesh, refine_adaptive, refine_uniform

log = logging.getLogger(__name__)

RADIUS = 2.0
R_KINK = 0.9
C1_OBST = -R_KINK / np.sqrt(1 - R_KINK**2)
C2_OBST = 1.0 / np.sqrt(1 - R_KINK**2)


def obstacle_radial(r):
    r = np.asarray(r, dtype=float)
    inner = np.sqrt(np.clip(1 - np.minimum(r, R_KINK) ** 2, 0.0, None))
    return np.where(r < R_KINK, inner, C1_OBST * r + C2_OBST)


def obstacle_radial_d(r):
    r = np.asarray(r, dtype=float)
    rr = np.minimum(r, R_KINK)
    return np.where(r < R_KINK, -rr / np.sqrt(1 - rr**2), C1_OBST)


def obstacle_laplacian(r):
    """Laplacian of the obstacle; ``g'' + g'/r`` for the radial profile."""
    r = np.asarray(r, dtype=float)
    rr = np.minimum(r, R_KINK)
    s = 1 - rr**2
    inner = -1.0 / s**1.5 - 1.0 / np.sqrt(s)
    return np.where(r < R_KINK, inner, C1_OBST / np.maximum(r, 1e-300))


@dataclass(frozen=True)
class ExactSolution:
    a: float
    C1: float
    c1: float = C1_OBST
    c2: float = C2_OBST

    def u_radial(self, r):
        r = np.asarray(r, dtype=float)
        outer = r**2 / 4 - 1 + self.C1 * np.log(np.maximum(r, 1e-300) / RADIUS)
        return np.where(r < self.a, obstacle_radial(r), outer)

    def du_radial(self, r):
        r = np.asarray(r, dtype=float)
        outer = r / 2 + self.C1 / np.maximum(r, 1e-300)
        return np.where(r < self.a, obstacle_radial_d(r), outer)

    def d2u_radial(self, r):
        r = np.asarray(r, dtype=float)
        return 0.5 - self.C1 / np.maximum(r, 1e-300) ** 2

    def u(self, x, y):
        return self.u_radial(np.hypot(x, y))

    def grad_u(self, x, y):
        r = np.hypot(x, y)
        d = self.du_radial(r) / np.maximum(r, 1e-300)
        return d * x, d * y

    def lam_radial(self, r):
        r = np.asarray(r, dtype=float)
        return np.where(r < self.a, 1.0 - obstacle_laplacian(r), 0.0)

    def lam(self, x, y):
        return self.lam_radial(np.hypot(x, y))


def load(x, y):
    return -np.ones_like(np.asarray(x, dtype=float))


def obstacle(x, y):
    return obstacle_radial(np.hypot(x, y))


def obstacle_grad(x, y):
    r = np.hypot(x, y)
    d = obstacle_radial_d(r) / np.maximum(r, 1e-300)
    return d * x, d * y


def problem_data(degree: int = 1, alpha=None) -> ProblemData:
    """Benchmark data with the default stabilization parameter for the degree."""
    return ProblemData(
        load=load,
        obstacle=obstacle,
        alpha=default_alpha(degree) if alpha is None else alpha,
        degree=degree,
        obstacle_grad=obstacle_grad,
    )


def _matching_residual(a: float) -> float:
    C1 = a * (obstacle_radial_d(a) - a / 2)
    return float(a**2 / 4 - 1 + C1 * np.log(a / RADIUS) - obstacle_radial(a))


def build_exact_solution(lo: float = 0.7, hi: float = 0.9, tol: float = 1e-12) -> ExactSolution:
    """Contact radius by bisection on ``u(a) - g(a)`` over [lo, hi]."""
    flo, fhi = _matching_residual(lo), _matching_residual(hi)
    if flo * fhi > 0:
        raise ValueError(f"contact radius not bracketed in [{lo}, {hi}]")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = _matching_residual(mid)
        if fm == 0:
            lo = hi = mid
            break
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    a = 0.5 * (lo + hi)
    return ExactSolution(a=a, C1=a * (float(obstacle_radial_d(a)) - a / 2))


# --------------------------------------------------------------------------
# error norms


def error_h1(u_full: np.ndarray, V: SpaceSpec, mesh: Mesh, exact: ExactSolution, order: int = 6) -> float:
    """Full H^1 norm of ``u - u_h`` with coefficients on all dofs of V."""
    Vmap = build_dofmap(mesh, V)
    tab = ElementTables(mesh, V.family, order)
    val, grad, _ = tab.interpolate(np.asarray(u_full)[Vmap.cell_dofs])
    ue = exact.u(tab.x, tab.y)
    gx, gy = exact.grad_u(tab.x, tab.y)
    e2 = (ue - val) ** 2 + (gx - grad[..., 0]) ** 2 + (gy - grad[..., 1]) ** 2
    return float(np.sqrt(np.sum(e2 * tab.dx)))


def error_lambda_neg(lam_h: np.ndarray, mesh: Mesh, exact: ExactSolution, order: int = 6) -> float:
    """Discrete negative norm ``(sum h_K^2 |lam - lam_h|_K^2)^{1/2}`` for P0 lam_h."""
    tab = ElementTables(mesh, "P0_disc", order)
    diff = exact.lam(tab.x, tab.y) - np.asarray(lam_h)[:, None]
    return float(np.sqrt(np.sum(mesh.diameters**2 * np.sum(diff**2 * tab.dx, axis=1))))


def neg_norm_per_element(lam_h, mesh, exact, order: int = 6) -> np.ndarray:
    tab = ElementTables(mesh, "P0_disc", order)
    diff = exact.lam(tab.x, tab.y) - np.asarray(lam_h)[:, None]
    return mesh.diameters**2 * np.sum(diff**2 * tab.dx, axis=1)


# --------------------------------------------------------------------------
# solve helpers and studies


@dataclass
class MethodSpec:
    """What to solve: ``method`` in mixed/stabilized/nitsche, degree, alpha."""

    method: str = "stabilized"
    degree: int = 1
    alpha: Optional[float] = None
    c: float = 1.0
    tol: float = 1e-10
    max_iter: int = 100
    linear_solver: str = "cg"

    def __post_init__(self):
        if self.method not in ("mixed", "stabilized", "nitsche"):
            raise ValueError(f"method must be mixed, stabilized or nitsche, got {self.method!r}")
        if self.degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {self.degree}")
        if self.alpha is None:
            self.alpha = default_alpha(self.degree)
        if self.method != "mixed" and not self.alpha > 0:
            raise ValueError("alpha must be positive for stabilized and nitsche methods")

    @property
    def V(self) -> SpaceSpec:
        return spaces_for(self.degree, self.method)[0]


def solve_level(spec: MethodSpec, mesh: Mesh, data: Optional[ProblemData] = None):
    """Assemble and solve one mesh; returns (solution, system, data)."""
    from .solver import nitsche_solve, pdas_mixed, pdas_stabilized

    data = data or problem_data(spec.degree, spec.alpha)
    V = spec.V
    if spec.method == "mixed":
        sys = assemble_mixed(mesh, V, MULTIPLIER_SPACE, data)
        sol = pdas_mixed(sys, c=spec.c, tol=spec.tol, max_iter=spec.max_iter)
    elif spec.method == "stabilized":
        sys = assemble_stabilized(mesh, V, MULTIPLIER_SPACE, data)
        sol = pdas_stabilized(sys, tol=spec.tol, max_iter=spec.max_iter, linear_solver=spec.linear_solver)
    else:
        sol = nitsche_solve(mesh, spec.degree, data, tol=spec.tol, max_iter=spec.max_iter, linear_solver=spec.linear_solver)
        sys = sol.system
    return sol, sys, data


@dataclass
class LevelRow:
    level: int
    h: float
    ndof_u: int
    ndof_lambda: int
    err_u_h1: float
    err_lambda_neg: float
    eta: float
    S: float
    osc: float
    pdas_iters: int
    converged: bool
    conform_ring_vertices: int = 0
    rate_u: float = float("nan")
    rate_lambda: float = float("nan")
    slope_u_N: float = float("nan")

    @property
    def ndof_total(self) -> int:
        return self.ndof_u + self.ndof_lambda


def rates(errors, hs) -> np.ndarray:
    """Pairwise rates ``log(e_i/e_{i+1}) / log(h_i/h_{i+1})``."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(hs, dtype=float)
    if len(e) < 2:
        return np.zeros(0)
    return np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    solutions: list = field(default_factory=list)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows])

    def fill_rates(self) -> None:
        ru = rates(self.column("err_u_h1"), self.column("h"))
        rl = rates(self.column("err_lambda_neg"), self.column("h"))
        for i in range(1, len(self.rows)):
            self.rows[i].rate_u = float(ru[i - 1])
            self.rows[i].rate_lambda = float(rl[i - 1])

    def fill_dof_slopes(self, window: int = 3) -> None:
        N = self.column("ndof_total")
        e = self.column("err_u_h1")
        for i in range(1, len(self.rows)):
            lo = max(0, i - window + 1)
            self.rows[i].slope_u_N = loglog_slope(N[lo : i + 1], e[lo : i + 1])


def level_row(level, spec, mesh, sol, sys, data, exact) -> LevelRow:
    """Errors, estimator and solver statistics of one solved level."""
    from .estimator import estimate, oscillation

    method = "mixed" if spec.method == "mixed" else "stabilized"
    u_full = sol.u_full
    err_u = error_h1(u_full, spec.V, mesh, exact)
    err_l = error_lambda_neg(sol.lam, mesh, exact)
    est = estimate(sol, mesh, spec.V, data, method)
    _, osc = oscillation(data, mesh)
    ring = int(np.count_nonzero(mesh.on_circle(mesh.conform_radius))) if mesh.conform_radius else 0
    return LevelRow(
        level=level,
        h=float(mesh.h),
        ndof_u=int(sys.V.nfree),
        ndof_lambda=int(sys.Q.ndofs),
        err_u_h1=err_u,
        err_lambda_neg=err_l,
        eta=est.eta,
        S=est.S_term,
        osc=osc,
        pdas_iters=sol.report.iterations,
        converged=sol.report.converged,
        conform_ring_vertices=ring,
    )


class StudyError(RuntimeError):
    def __init__(self, level: int, message: str):
        super().__init__(f"level {level}: {message}")
        self.level = level


def initial_mesh(family: str = "nonconforming", initial_h: float = 0.5, exact: Optional[ExactSolution] = None) -> Mesh:
    if family not in ("conforming", "nonconforming"):
        raise ValueError(f"mesh family must be conforming or nonconforming, got {family!r}")
    conform = None
    if family == "conforming":
        conform = (exact or build_exact_solution()).a
    return generate_disk_mesh(RADIUS, initial_h, conform_radius=conform)


def convergence_study(
    spec: MethodSpec,
    family: str = "nonconforming",
    levels: int = 4,
    initial_h: float = 0.5,
    keep: bool = False,
) -> ConvergenceTable:
    """Uniform refinement study on the benchmark with per-pair rates."""
    if levels < 1:
        raise ValueError("levels must be at least 1")
    exact = build_exact_solution()
    mesh = initial_mesh(family, initial_h, exact)
    table = ConvergenceTable()
    for lev in range(levels):
        if lev:
            mesh = refine_uniform(mesh)
        try:
            sol, sys, data = solve_level(spec, mesh)
        except Exception as exc:  # add level context
            raise StudyError(lev, str(exc)) from exc
        if not sol.report.converged:
            raise StudyError(lev, sol.report.message or "solver did not converge")
        table.rows.append(level_row(lev, spec, mesh, sol, sys, data, exact))
        if keep:
            table.meshes.append(mesh)
            table.solutions.append(sol)
        log.info("level %d: h=%.4g err_u=%.4e", lev, mesh.h, table.rows[-1].err_u_h1)
    table.fill_rates()
    table.fill_dof_slopes()
    return table


@dataclass
class AdaptiveStep:
    marked: np.ndarray
    marked_near_contact: float


def adaptive_study(
    spec: MethodSpec,
    theta: float = 0.9,
    max_dofs: int = 30000,
    initial_h: float = 0.5,
    family: str = "nonconforming",
    max_levels: int = 40,
    keep: bool = False,
) -> ConvergenceTable:
    """Solve, estimate, mark and bisect until the dof budget is exhausted.

    The loop stops before solving a mesh whose total dof count would exceed
    ``max_dofs``; if the initial mesh already exceeds the budget only that
    mesh is solved.
    """
    from .estimator import local_indicator, mark

    exact = build_exact_solution()
    mesh = initial_mesh(family, initial_h, exact)
    table = ConvergenceTable()
    steps = []
    for lev in range(max_levels):
        try:
            sol, sys, data = solve_level(spec, mesh)
        except Exception as exc:
            raise StudyError(lev, str(exc)) from exc
        if not sol.report.converged:
            raise StudyError(lev, sol.report.message or "solver did not converge")
        table.rows.append(level_row(lev, spec, mesh, sol, sys, data, exact))
        if keep:
            table.meshes.append(mesh)
            table.solutions.append(sol)
        E = local_indicator(sol, mesh, spec.V, data)
        res = mark(E, theta)
        near = _near_contact_fraction(mesh, res.marked, exact.a)
        steps.append(AdaptiveStep(res.marked, near))
        new_mesh = refine_adaptive(mesh, res.marked)
        if _estimated_dofs(new_mesh, spec) > max_dofs:
            break
        mesh = new_mesh
    table.fill_dof_slopes()
    table.steps = steps
    return table


def _estimated_dofs(mesh: Mesh, spec: MethodSpec) -> int:
    V = spec.V
    return build_dofmap(mesh, V).nfree + mesh.nelements


def _near_contact_fraction(mesh: Mesh, marked: np.ndarray, a: float) -> float:
    if len(marked) == 0:
        return 0.0
    c = mesh.centroids[marked]
    d = np.abs(np.hypot(c[:, 0], c[:, 1]) - a)
    return float(np.mean(d <= 2 * mesh.diameters[marked]))


# --------------------------------------------------------------------------
# inf-sup diagnostic


MAX_INFSUP_DOFS = 400


def infsup_diagnostic(mesh: Mesh, V: SpaceSpec, Q: SpaceSpec = MULTIPLIER_SPACE) -> float:
    """Discrete inf-sup constant in the H^1 / discrete negative norm pair.

    ``beta^2`` is the smallest eigenvalue of ``D^{-1/2} B H^{-1} B^T D^{-1/2}``
    with H the H^1 Gram matrix on free dofs and ``D_KK = h_K^2 |K|``.
    """
    import scipy.linalg as sla

    sys = assemble_mixed(mesh, V, Q, ProblemData(load=0.0, obstacle=0.0))
    n = sys.V.nfree + sys.Q.ndofs
    if n > MAX_INFSUP_DOFS:
        raise ValueError(f"inf-sup diagnostic limited to {MAX_INFSUP_DOFS} dofs, got {n}")
    H = sys.A.toarray() + mass_matrix(mesh, V).toarray()
    B = sys.B.toarray()
    D = mesh.diameters**2 * mesh.areas
    S = B @ sla.solve(H, B.T, assume_a="pos")
    Dm = 1.0 / np.sqrt(D)
    S = Dm[:, None] * S * Dm[None, :]
    ev = sla.eigh(0.5 * (S + S.T), eigvals_only=True)
    return float(np.sqrt(max(ev.min(), 0.0)))
