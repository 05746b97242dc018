"""Primal-dual active set iterations, the Nitsche fixed point and KKT checks."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .assembly import (
    DEFAULT_ORDER,
    ElementTables,
    MixedSystem,
    ProblemData,
    StabilizedSystem,
    assemble_stabilized,
    inverse_constant,
)
from .fespace import MULTIPLIER_SPACE, build_dofmap, displacement_space
from .linalg import (
    Factorized,
    SingularSystemError,
    SolverError,
    SolveStats,
    csr,
    saddle_solve,
    spd_solve,
)
from .mesh import Mesh

log = logging.getLogger(__name__)

LINEAR_RTOL = 1e-12


class ConvergenceError(RuntimeError):
    """Raised by callers that require a converged solve."""


@dataclass
class SolverReport:
    iterations: int = 0
    lambda_update_norms: list = field(default_factory=list)
    active_set_sizes: list = field(default_factory=list)
    converged: bool = False
    message: str = ""
    linear: SolveStats = field(default_factory=SolveStats)
    direct_fallbacks: int = 0
    alpha_warning: str = ""


@dataclass
class DiscreteSolution:
    """Free displacement coefficients, multipliers and the final active set."""

    u: np.ndarray
    lam: np.ndarray
    active_set: np.ndarray
    report: SolverReport
    system: object = None
    lam_quadrature: Optional[np.ndarray] = None

    @property
    def u_full(self) -> np.ndarray:
        """Coefficients on all displacement dofs (zeros on the boundary)."""
        return self.system.V.expand(self.u)


class LinearSolver:
    """SPD solve by Jacobi-PCG, falling back to sparse LU on breakdown.

    ``method`` is ``"cg"`` (default), ``"direct"`` or ``"cg-strict"`` (no
    fallback; breakdown raises).
    """

    def __init__(self, method: str = "cg", rel_tol: float = LINEAR_RTOL, report: Optional[SolverReport] = None):
        if method not in ("cg", "direct", "cg-strict"):
            raise ValueError(f"unknown linear solver {method!r}")
        self.method = method
        self.rel_tol = rel_tol
        self.report = report or SolverReport()
        self._switched = False

    def __call__(self, A, b, x0=None):
        if self.method == "direct" or self._switched:
            return self._direct(A, b)
        try:
            return spd_solve(A, b, self.rel_tol, x0, self.report.linear)
        except SolverError as exc:
            if self.method == "cg-strict":
                raise
            # the matrix family of this run is not SPD; stay with LU from now on
            log.warning("CG failed (%s); switching to sparse LU for this run", exc)
            self._switched = True
            self.report.direct_fallbacks += 1
            return self._direct(A, b)

    def _direct(self, A, b):
        if A.shape[0] == 0:
            return np.zeros(0)
        x = Factorized(A)(b)
        res = np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300)
        self.report.linear.record(0, float(res))
        return x


def _positive_set(v: np.ndarray) -> np.ndarray:
    return np.flatnonzero(v > 0)


def pdas_mixed(
    sys: MixedSystem,
    c: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 100,
    rel_tol: float = LINEAR_RTOL,
) -> DiscreteSolution:
    """Primal-dual active set method for the mixed complementarity system.

    Iterates ``s = lam + c (g - B u)``; rows with ``s > 0`` are active and the
    saddle-point system restricted to them yields the next ``(u, lam)``.
    Stops when the max-norm of the multiplier update is at most ``tol``.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    A, B, f, g = sys.A, sys.B, sys.f, sys.g
    report = SolverReport()
    A_solve = Factorized(A)
    lam = np.zeros(B.shape[0])
    u = A_solve(f)
    report.linear.record(0, 0.0)
    prev_active = None
    k = 0
    while True:
        s = lam + c * (g - B @ u)
        active = _positive_set(s)
        if prev_active is not None and np.array_equal(active, prev_active):
            # same active set as before: the restricted solve reproduces the current iterate
            lam_new, u_new = lam.copy(), u
        else:
            lam_new = np.zeros_like(lam)
            try:
                u_new, lam_act = saddle_solve(A, B[active], f, g[active], rel_tol, A_solve, report.linear)
            except SingularSystemError as exc:
                raise SingularSystemError(f"iteration {k + 1}: {exc}", exc.residual) from exc
            lam_new[active] = lam_act
        k += 1
        update = float(np.max(np.abs(lam_new - lam), initial=0.0))
        report.lambda_update_norms.append(update)
        report.active_set_sizes.append(len(active))
        u, lam = u_new, lam_new
        prev_active = active
        if update <= tol:
            report.converged = True
            break
        if k >= max_iter:
            report.message = f"no convergence in {max_iter} iterations (last update {update:.3e})"
            break
    report.iterations = k
    return DiscreteSolution(u, lam, _positive_set(lam), report, sys)


def pdas_stabilized(
    sys: StabilizedSystem,
    tol: float = 1e-10,
    max_iter: int = 100,
    linear_solver: str = "cg",
    rel_tol: float = LINEAR_RTOL,
    check_alpha: bool = False,
    alpha_check_max_dofs: int = 400,
) -> DiscreteSolution:
    """Primal-dual active set method for the stabilized system.

    ``lam^0 = C^{-1}(g - B u^0)`` from the unconstrained solve; then with
    ``a`` the positive entries of ``lam^k``::

        (A + B_a^T C_aa^{-1} B_a) u = f + B_a^T C_aa^{-1} g_a
        lam = max(0, C^{-1}(g - B u))

    C is diagonal, so its inverse is applied element by element.
    """
    A, B, f, g = sys.A, sys.B, sys.f, sys.g
    cdiag = sys.C_diag
    report = SolverReport()
    if check_alpha:
        report.alpha_warning = alpha_range_warning(sys)
    solve = LinearSolver(linear_solver, rel_tol, report)
    u = solve(A, f)
    lam = (g - B @ u) / cdiag
    prev_active = None
    k = 0
    while True:
        active = _positive_set(lam)
        if prev_active is not None and np.array_equal(active, prev_active):
            u_new = u
        else:
            Ba = B[active]
            w = 1.0 / cdiag[active]
            K = csr(A + Ba.T @ sp.diags(w) @ Ba)
            rhs = f + Ba.T @ (w * g[active])
            u_new = solve(K, rhs, x0=u)
        lam_new = np.maximum(0.0, (g - B @ u_new) / cdiag)
        k += 1
        update = float(np.max(np.abs(lam_new - lam), initial=0.0))
        report.lambda_update_norms.append(update)
        report.active_set_sizes.append(len(active))
        u, lam = u_new, lam_new
        prev_active = active
        if update <= tol:
            report.converged = True
            break
        if k >= max_iter:
            report.message = f"no convergence in {max_iter} iterations (last update {update:.3e})"
            break
    report.iterations = k
    return DiscreteSolution(u, lam, _positive_set(lam), report, sys)


def alpha_range_warning(sys: StabilizedSystem, max_dofs: int = 400) -> str:
    """Warn when alpha exceeds the dense inverse-constant estimate.

    The estimate is computed on the system's mesh when it is small enough and
    otherwise skipped (empty string).
    """
    V = sys.V.spec
    if sys.V.nfree > max_dofs:
        return ""
    c_inv = inverse_constant(sys.mesh, V)
    amax = float(np.max(sys.alpha))
    if amax >= c_inv:
        return f"alpha={amax:g} >= inverse-estimate constant C_I~{c_inv:.4g}; A_alpha is not positive definite"
    return ""


# --------------------------------------------------------------------------
# Nitsche / penalty iteration


def _nitsche_system(mesh, V, Vmap, tab, data, alpha, contact_q, element_mode):
    """Assemble the Nitsche bilinear form for a given contact set.

    ``contact_q`` is a (nt, nq) boolean mask of quadrature points in the
    contact region. In element mode the multiplier is elementwise constant and
    the local elimination uses elementwise means (L2 projections); otherwise
    the pointwise formulation is used.
    """
    nt = mesh.nelements
    h2 = mesh.diameters**2
    ah2 = alpha * h2
    dx = tab.dx
    fq = data.f(tab.x, tab.y)
    gq = data.g(tab.x, tab.y)
    vals = tab.values  # (nb, nq)
    G = tab.grads
    Lp = tab.laps
    K = np.einsum("kiqd,kjqd,kq->kij", G, G, dx)
    F = np.einsum("iq,kq->ki", vals, fq * dx)
    if element_mode:
        cK = contact_q[:, 0]
        area = dx.sum(axis=1)
        free = ~cK
        # outside contact: -a h^2 (lap u, lap v) and rhs a h^2 (f, lap v)
        LL = np.einsum("kiq,kjq,kq->kij", Lp, Lp, dx)
        K -= (free * ah2)[:, None, None] * LL
        F += (free * ah2)[:, None] * np.einsum("kiq,kq->ki", Lp, fq * dx)
        # contact elements, projections P onto constants
        m = np.einsum("iq,kq->ki", vals, dx)  # int phi
        ml = np.einsum("kiq,kq->ki", Lp, dx)  # int lap phi
        fbar = (fq * dx).sum(axis=1) / area
        gbar = (gq * dx).sum(axis=1) / area
        inv_a = 1.0 / area
        Kc = (
            np.einsum("ki,kj->kij", m, ml) * inv_a[:, None, None]
            + np.einsum("ki,kj->kij", ml, m) * inv_a[:, None, None]
            + np.einsum("ki,kj->kij", m, m) * (inv_a / ah2)[:, None, None]
            + ah2[:, None, None] * (LL - np.einsum("ki,kj->kij", ml, ml) * inv_a[:, None, None])
        )
        K += cK[:, None, None] * Kc
        # rhs: (f, v) on the free part plus ((I - P) f, v) on contact
        Fc = (
            -fbar[:, None] * m
            + ah2[:, None] * (np.einsum("kiq,kq->ki", Lp, fq * dx) - fbar[:, None] * ml)
            + gbar[:, None] * ml
            + (gbar / ah2)[:, None] * m
        )
        F += cK[:, None] * Fc
    else:
        cq = contact_q.astype(float)
        nq = ~contact_q
        dxc = dx * cq
        dxn = dx * nq
        K += np.einsum("iq,kjq,kq->kij", vals, Lp, dxc) + np.einsum("kiq,jq,kq->kij", Lp, vals, dxc)
        K += np.einsum("iq,jq,kq->kij", vals, vals, dxc / ah2[:, None])
        K -= np.einsum("kiq,kjq,kq->kij", Lp, Lp, dxn * ah2[:, None])
        F = np.einsum("iq,kq->ki", vals, fq * dxn)
        F += np.einsum("kiq,kq->ki", Lp, gq * dxc)
        F += np.einsum("iq,kq->ki", vals, gq * dxc / ah2[:, None])
        F += np.einsum("kiq,kq->ki", Lp, fq * dxn * ah2[:, None])
    cd = Vmap.cell_dofs
    nV = Vmap.ndofs
    nb = cd.shape[1]
    r = np.repeat(cd[:, :, None], nb, axis=2)
    c = np.repeat(cd[:, None, :], nb, axis=1)
    Kg = csr(sp.coo_matrix((K.ravel(), (r.ravel(), c.ravel())), shape=(nV, nV)))
    Fg = np.zeros(nV)
    np.add.at(Fg, cd.ravel(), F.ravel())
    fr = Vmap.free
    return csr(Kg[fr][:, fr]), Fg[fr]


def _nitsche_lambda(tab, Vmap, u_free, data, alpha, h2, element_mode):
    """Contact force update max{0, (a h^2)^{-1}(g - u) - f - lap_h u}."""
    u_full = Vmap.expand(u_free)
    val, _, lap = tab.interpolate(u_full[Vmap.cell_dofs])
    ah2 = (alpha * h2)[:, None]
    expr = (data.g(tab.x, tab.y) - val) / ah2 - data.f(tab.x, tab.y) - lap
    if element_mode:
        mean = (expr * tab.dx).sum(axis=1) / tab.dx.sum(axis=1)
        lam_k = np.maximum(0.0, mean)
        return np.repeat(lam_k[:, None], tab.dx.shape[1], axis=1)
    return np.maximum(0.0, expr)


def _neg_norm_q(diff_q, tab, h2):
    return float(np.sqrt(np.sum(h2[:, None] * diff_q**2 * tab.dx)))


def nitsche_solve(
    mesh: Mesh,
    k: int,
    data: ProblemData,
    tol: float = 1e-10,
    max_iter: int = 100,
    contact: Optional[str] = None,
    linear_solver: str = "cg",
    order: int = DEFAULT_ORDER,
) -> DiscreteSolution:
    """Fixed-point iteration of the Nitsche (penalty for k = 1) method.

    Given ``u^k`` the contact force ``max{0, (a h^2)^{-1}(g - u^k) - f - lap_h u^k}``
    determines the contact region, the Nitsche problem for that region gives
    ``u^{k+1}``. Iteration stops when the discrete negative norm of the force
    update is at most ``tol``.

    ``contact="element"`` (default for k = 1) classifies whole elements by the
    mean of the update, which reproduces the local elimination of an
    elementwise constant multiplier; ``contact="pointwise"`` (default for
    k = 2) classifies quadrature points.
    """
    if k not in (1, 2):
        raise ValueError("k must be 1 or 2")
    if contact is None:
        contact = "element" if k == 1 else "pointwise"
    if contact not in ("element", "pointwise"):
        raise ValueError(f"unknown contact granularity {contact!r}")
    element_mode = contact == "element"
    alpha = data.alpha_per_element(mesh.nelements)
    if np.any(alpha <= 0):
        raise ValueError("nitsche_solve requires alpha > 0")
    V = displacement_space(k)
    Vmap = build_dofmap(mesh, V)
    tab = ElementTables(mesh, V.family, order)
    h2 = mesh.diameters**2
    report = SolverReport()
    solve = LinearSolver(linear_solver, LINEAR_RTOL, report)

    nt, nq = tab.dx.shape
    contact_q = np.zeros((nt, nq), dtype=bool)
    K, F = _nitsche_system(mesh, V, Vmap, tab, data, alpha, contact_q, element_mode)
    u = solve(K, F)
    lam_q = np.zeros((nt, nq))
    seen = {contact_q.tobytes()}
    prev_key = contact_q.tobytes()
    it = 0
    while True:
        lam_new = _nitsche_lambda(tab, Vmap, u, data, alpha, h2, element_mode)
        update = _neg_norm_q(lam_new - lam_q, tab, h2)
        it += 1
        report.lambda_update_norms.append(update)
        lam_q = lam_new
        contact_q = lam_q > 0
        report.active_set_sizes.append(int(contact_q.any(axis=1).sum()))
        if update <= tol:
            report.converged = True
            break
        if it >= max_iter:
            report.message = f"no convergence in {max_iter} iterations (last update {update:.3e})"
            break
        key = contact_q.tobytes()
        if key == prev_key:
            # same contact region: the next solve reproduces u
            continue
        if key in seen:
            report.message = f"contact set oscillation detected at iteration {it}"
            break
        seen.add(key)
        prev_key = key
        K, F = _nitsche_system(mesh, V, Vmap, tab, data, alpha, contact_q, element_mode)
        u = solve(K, F, x0=u)
    report.iterations = it
    area = tab.dx.sum(axis=1)
    lam_elem = (lam_q * tab.dx).sum(axis=1) / area
    sys = _NitscheSystem(V=Vmap, Q=build_dofmap(mesh, MULTIPLIER_SPACE), mesh=mesh, alpha=alpha)
    return DiscreteSolution(u, lam_elem, _positive_set(lam_elem), report, sys, lam_quadrature=lam_q)


@dataclass
class _NitscheSystem:
    V: object
    Q: object
    mesh: Mesh
    alpha: np.ndarray
    stabilized: bool = True


# --------------------------------------------------------------------------
# KKT verification


@dataclass
class KKTResult:
    primal_violation: float
    dual_violation: float
    complementarity: float
    equation_residual: float
    scale: float

    def ok(self, rtol: float = 1e-9) -> bool:
        s = rtol * self.scale
        return (
            self.primal_violation <= s
            and self.dual_violation <= 1e-12 * max(1.0, self.scale)
            and self.complementarity <= s
        )

    def __iter__(self):
        return iter((self.primal_violation, self.dual_violation, self.complementarity))


def kkt_check(sol: DiscreteSolution, sys=None) -> KKTResult:
    """Infinity norms of the complementarity conditions.

    ``primal``: ``min(Bu - g, 0)`` (with ``+ C lam`` for stabilized systems);
    ``dual``: ``min(lam, 0)``; ``complementarity``: ``lam * (Bu - g)``.
    Also reports the equation residual ``A u - B^T lam - f`` and a scale
    (max of the magnitudes entering the constraint) for relative tolerances.
    """
    sys = sys if sys is not None else sol.system
    u, lam = sol.u, sol.lam
    gap = sys.B @ u - sys.g
    if getattr(sys, "C", None) is not None:
        gap = gap + sys.C @ lam
    eq = sys.A @ u - sys.B.T @ lam - sys.f
    scale = max(
        1.0,
        float(np.max(np.abs(sys.g), initial=0.0)),
        float(np.max(np.abs(sys.B @ u), initial=0.0)),
    )
    # complementarity relative to the multiplier magnitude
    lam_scale = max(1.0, float(np.max(np.abs(lam), initial=0.0)))
    return KKTResult(
        primal_violation=float(np.max(np.maximum(-gap, 0.0), initial=0.0)),
        dual_violation=float(np.max(np.maximum(-lam, 0.0), initial=0.0)),
        complementarity=float(np.max(np.abs(lam * gap), initial=0.0)) / lam_scale,
        equation_residual=float(np.linalg.norm(eq) / max(np.linalg.norm(sys.f), 1e-300)),
        scale=scale,
    )
