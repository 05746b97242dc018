"""Residual a posteriori estimators, adaptive indicators and bulk marking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import DEFAULT_ORDER, ElementTables, ProblemData
from .fespace import MULTIPLIER_SPACE, Geometry, SpaceSpec, basis, build_dofmap, gauss_line
from .mesh import LOCAL_EDGES, Mesh


@dataclass
class ErrorBreakdown:
    """Components of the residual estimator.

    ``eta = (sum eta_K^2 + sum eta_E^2)^{1/2}``; ``S_term`` is the
    consistency term of the chosen method and ``total = eta + S_term + osc``.
    """

    eta_K: np.ndarray
    eta_E: np.ndarray
    S_term: float
    osc_K: np.ndarray
    eta: float
    total: float
    S_parts: tuple = (0.0, 0.0)

    @property
    def osc(self) -> float:
        return float(np.sqrt(np.sum(self.osc_K**2)))


@dataclass
class MarkingResult:
    marked: np.ndarray
    fraction: float


def _coefficients(sol, mesh: Mesh, V: SpaceSpec) -> np.ndarray:
    Vmap = build_dofmap(mesh, V)
    u = np.asarray(sol.u, dtype=float)
    if u.shape[0] == Vmap.nfree:
        u = Vmap.expand(u)
    return u[Vmap.cell_dofs]


def _lam(sol) -> np.ndarray:
    return np.asarray(getattr(sol, "lam", sol), dtype=float)


def element_residuals(sol, mesh: Mesh, V: SpaceSpec, data: ProblemData, order: int = DEFAULT_ORDER) -> np.ndarray:
    """``h_K^2 |lap u_h + lam_h + f|_K^2`` per element."""
    tab = ElementTables(mesh, V.family, order)
    _, _, lap = tab.interpolate(_coefficients(sol, mesh, V))
    r = lap + _lam(sol)[:, None] + data.f(tab.x, tab.y)
    return mesh.diameters**2 * np.sum(r**2 * tab.dx, axis=1)


def edge_jumps(sol, mesh: Mesh, V: SpaceSpec, npoints: int = 3):
    """``|[[grad u_h . n]]|_E^2`` on every interior edge.

    Returns (edge ids, left elements, right elements, lengths, squared jumps).
    """
    ie = mesh.interior_edges
    coeffs = _coefficients(sol, mesh, V)
    t, w = gauss_line(npoints)
    flux = []
    for side in (ie.left, ie.right):
        fl = np.zeros((len(ie.ids), npoints))
        tri = mesh.triangles[side]
        # local edge index and orientation of the shared edge in this element
        for j, (p, q) in enumerate(LOCAL_EDGES):
            for rev in (False, True):
                a, b = (q, p) if rev else (p, q)
                sel = np.flatnonzero((tri[:, a] == ie.vertices[:, 0]) & (tri[:, b] == ie.vertices[:, 1]))
                if len(sel) == 0:
                    continue
                lam = np.zeros((npoints, 3))
                lam[:, a] = 1 - t
                lam[:, b] = t
                geom = Geometry.from_mesh(mesh, side[sel])
                _, grads, _ = basis(V.family, lam, geom)
                g = np.einsum("kb,kbqd->kqd", coeffs[side[sel]], grads)
                fl[sel] = np.einsum("kqd,kd->kq", g, ie.normals[sel])
        flux.append(fl)
    jump = flux[0] - flux[1]
    sq = ie.lengths * np.sum(jump**2 * w[None, :], axis=1)
    return ie.ids, ie.left, ie.right, ie.lengths, sq


def _penetration(sol, mesh, V, data, order):
    """Per element: |(g-u)_+|_{1,K}^2, int (g-u)_+ lam and int (u-g)_+ lam."""
    tab = ElementTables(mesh, V.family, order)
    val, grad, _ = tab.interpolate(_coefficients(sol, mesh, V))
    d = data.g(tab.x, tab.y) - val
    gx, gy = data.grad_g(tab.x, tab.y)
    pos = d > 0
    dgx = (gx - grad[..., 0]) * pos
    dgy = (gy - grad[..., 1]) * pos
    h1 = np.sum((np.maximum(d, 0) ** 2 + dgx**2 + dgy**2) * tab.dx, axis=1)
    lam = _lam(sol)[:, None]
    gu = np.sum(np.maximum(d, 0) * lam * tab.dx, axis=1)
    ug = np.sum(np.maximum(-d, 0) * lam * tab.dx, axis=1)
    return h1, gu, ug


def oscillation(data: ProblemData, mesh: Mesh, Q: SpaceSpec = MULTIPLIER_SPACE, order: int = DEFAULT_ORDER):
    """``osc_K = h_K |f - f_h|_K`` with f_h the elementwise mean; returns (osc_K, osc)."""
    if Q.degree != 0:
        raise ValueError("only elementwise constant projections are supported")
    tab = ElementTables(mesh, Q.family, order)
    fq = data.f(tab.x, tab.y)
    mean = np.sum(fq * tab.dx, axis=1) / np.sum(tab.dx, axis=1)
    oscK = mesh.diameters * np.sqrt(np.sum((fq - mean[:, None]) ** 2 * tab.dx, axis=1))
    return oscK, float(np.sqrt(np.sum(oscK**2)))


def estimate(sol, mesh: Mesh, V: SpaceSpec, data: ProblemData, method: str = "stabilized", order: int = DEFAULT_ORDER) -> ErrorBreakdown:
    """Residual estimator and the consistency term of the method.

    ``S = |(g-u_h)_+|_1 + <(g-u_h)_+, lam_h>^{1/2}`` for the mixed method and
    ``S = |(g-u_h)_+|_1 + <(u_h-g)_+, lam_h>^{1/2}`` for stabilized ones, with
    positive parts taken at quadrature points.
    """
    if method not in ("mixed", "stabilized"):
        raise ValueError(f"method must be mixed or stabilized, got {method!r}")
    etaK2 = element_residuals(sol, mesh, V, data, order)
    _, _, _, _, jumps = edge_jumps(sol, mesh, V)
    etaE2 = mesh.interior_edges.lengths * jumps
    h1, gu, ug = _penetration(sol, mesh, V, data, order)
    first = float(np.sqrt(np.sum(h1)))
    prod = float(np.sum(gu if method == "mixed" else ug))
    second = float(np.sqrt(max(prod, 0.0)))
    oscK, osc = oscillation(data, mesh, order=order)
    eta = float(np.sqrt(np.sum(etaK2) + np.sum(etaE2)))
    S = first + second
    return ErrorBreakdown(
        eta_K=np.sqrt(etaK2),
        eta_E=np.sqrt(etaE2),
        S_term=S,
        osc_K=oscK,
        eta=eta,
        total=eta + S + osc,
        S_parts=(first, second),
    )


def local_indicator(sol, mesh: Mesh, V: SpaceSpec, data: ProblemData, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Elementwise indicator ``E_K`` driving adaptive refinement.

    ``E_K^2 = h_K^2 |lap u_h + lam_h + f|_K^2 + 1/2 h_K sum_E |[[grad u_h . n]]|_E^2
    + |(g-u_h)_+|_{1,K}^2 + int_K (u_h-g)_+ lam_h``, the edge sum running over
    the interior edges of K.
    """
    E2 = element_residuals(sol, mesh, V, data, order)
    _, left, right, _, jumps = edge_jumps(sol, mesh, V)
    per = np.zeros(mesh.nelements)
    np.add.at(per, left, 0.5 * jumps)
    np.add.at(per, right, 0.5 * jumps)
    E2 = E2 + mesh.diameters * per
    h1, _, ug = _penetration(sol, mesh, V, data, order)
    E2 = E2 + h1 + np.maximum(ug, 0.0)
    return np.sqrt(E2)


def mark(indicators, theta: float = 0.9) -> MarkingResult:
    """Bulk marking on squared indicators.

    Marks the shortest prefix of elements, sorted by decreasing squared
    indicator (ties by element id), whose sum reaches ``theta`` times the
    total.
    """
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    e2 = np.asarray(indicators, dtype=float) ** 2
    total = float(e2.sum())
    if e2.size == 0 or total == 0.0:
        return MarkingResult(np.zeros(0, dtype=np.int64), 1.0)
    order = np.lexsort((np.arange(e2.size), -e2))
    csum = np.cumsum(e2[order])
    # relative slack guards the comparison against summation rounding
    n = int(np.searchsorted(csum, theta * total * (1 - 1e-12))) + 1
    n = min(n, e2.size)
    marked = np.sort(order[:n])
    return MarkingResult(marked, float(csum[n - 1] / total))
