"""Assembly of the mixed and residual-stabilized obstacle systems.

Unknowns are the free displacement dofs (homogeneous Dirichlet dofs are
eliminated) and one multiplier per element. With ``phi`` the displacement
basis, ``xi`` the multiplier basis and ``h`` the element diameter::

    A   = (grad phi, grad phi)            B   = (xi, phi)
    f   = (f, phi)                        g   = (g, xi)
    A_a = A - a sum h^2 (lap phi, lap phi)
    B_a = B + a sum h^2 (xi, lap phi)
    C_a = a sum h^2 (xi, xi)
    f_a = f + a sum h^2 (f, lap phi)
    g_a = g - a sum h^2 (f, xi)
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import scipy.sparse as sp

from .fespace import (
    MULTIPLIER_SPACE,
    DofMap,
    Family,
    Geometry,
    SpaceSpec,
    basis,
    build_dofmap,
    displacement_space,
    quadrature_rule,
)
from .linalg import csr
from .mesh import Mesh

DEFAULT_ORDER = 4
Field = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def default_alpha(k: int) -> float:
    return {1: 0.01, 2: 0.1}[k]


def evaluate(fn: Field, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if callable(fn):
        return np.broadcast_to(np.asarray(fn(x, y), dtype=float), x.shape)
    return np.full(x.shape, float(fn))


@dataclass
class ProblemData:
    """Load, obstacle and stabilization parameter.

    ``alpha`` may be a scalar or one value per element.
    ``obstacle_grad`` returns the pair (dg/dx, dg/dy); it is only needed by
    the a posteriori estimators and falls back to central differences.
    """

    load: Field = -1.0
    obstacle: Field = 0.0
    alpha: Union[float, np.ndarray] = 0.0
    degree: int = 1
    obstacle_grad: Optional[Callable] = None

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError(f"degree must be 1 or 2, got {self.degree}")
        if np.any(np.asarray(self.alpha) < 0):
            raise ValueError("alpha must be nonnegative")

    def alpha_per_element(self, nt: int) -> np.ndarray:
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim == 0:
            return np.full(nt, float(a))
        if a.shape != (nt,):
            raise ValueError(f"alpha has {a.size} entries for {nt} elements")
        return a

    def f(self, x, y):
        return evaluate(self.load, x, y)

    def g(self, x, y):
        return evaluate(self.obstacle, x, y)

    def grad_g(self, x, y):
        if self.obstacle_grad is not None:
            gx, gy = self.obstacle_grad(x, y)
            return np.broadcast_to(gx, x.shape), np.broadcast_to(gy, x.shape)
        if not callable(self.obstacle):
            return np.zeros(x.shape), np.zeros(x.shape)
        eps = 1e-6
        gx = (self.g(x + eps, y) - self.g(x - eps, y)) / (2 * eps)
        gy = (self.g(x, y + eps) - self.g(x, y - eps)) / (2 * eps)
        return gx, gy

    def scaled(self, s: float) -> "ProblemData":
        """Data with load and obstacle multiplied by s."""
        load = self.load
        obst = self.obstacle
        grad = self.obstacle_grad
        return ProblemData(
            load=(lambda x, y: s * evaluate(load, x, y)),
            obstacle=(lambda x, y: s * evaluate(obst, x, y)),
            alpha=self.alpha,
            degree=self.degree,
            obstacle_grad=None if grad is None else (lambda x, y: tuple(s * c for c in grad(x, y))),
        )


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("OBSTACLE_FEM_THREADS", "1")))
    except ValueError:
        return 1


class ElementTables:
    """Basis values at the quadrature points of every element.

    Attributes
    ----------
    x, y : (nt, nq) physical quadrature points
    dx : (nt, nq) quadrature weights times |J|
    values : (nb, nq); grads : (nt, nb, nq, 2); laps : (nt, nb, nq)
    """

    def __init__(self, mesh: Mesh, family, order: int = DEFAULT_ORDER, elements=None):
        self.rule = quadrature_rule(order)
        self.geom = Geometry.from_mesh(mesh, elements)
        pts = self.geom.to_physical(self.rule.points)
        self.x, self.y = pts[..., 0], pts[..., 1]
        self.dx = np.abs(self.geom.detj)[:, None] * self.rule.weights[None, :]
        self.values, self.grads, self.laps = basis(family, self.rule.points, self.geom)

    def interpolate(self, coeffs_local: np.ndarray):
        """Value, gradient and Laplacian at quadrature points from local coefficients (nt, nb)."""
        val = coeffs_local @ self.values
        grad = np.einsum("kb,kbqd->kqd", coeffs_local, self.grads)
        lap = np.einsum("kb,kbq->kq", coeffs_local, self.laps)
        return val, grad, lap


def _scatter(local: np.ndarray, rows: np.ndarray, cols: np.ndarray, shape) -> sp.csr_matrix:
    nt, ni, nj = local.shape
    r = np.repeat(rows[:, :, None], nj, axis=2)
    c = np.repeat(cols[:, None, :], ni, axis=1)
    return csr(sp.coo_matrix((local.ravel(), (r.ravel(), c.ravel())), shape=shape))


def _chunked(fn, nt: int, chunk: int = 8192):
    """Evaluate fn on element slices, concatenating in fixed element order."""
    slices = [slice(s, min(s + chunk, nt)) for s in range(0, nt, chunk)] or [slice(0, 0)]
    nthreads = _threads()
    if nthreads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(nthreads) as pool:
            parts = list(pool.map(fn, slices))
    else:
        parts = [fn(s) for s in slices]
    return np.concatenate(parts, axis=0)


def _restrict(M: sp.csr_matrix, rows=None, cols=None) -> sp.csr_matrix:
    if rows is not None:
        M = M[rows]
    if cols is not None:
        M = M[:, cols]
    return csr(M)


@dataclass
class MixedSystem:
    A: sp.csr_matrix
    B: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    V: DofMap
    Q: DofMap
    mesh: Mesh

    @property
    def stabilized(self) -> bool:
        return False


@dataclass
class StabilizedSystem:
    A: sp.csr_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    V: DofMap
    Q: DofMap
    mesh: Mesh
    alpha: np.ndarray = field(default=None)

    @property
    def stabilized(self) -> bool:
        return True

    @property
    def C_diag(self) -> np.ndarray:
        return self.C.diagonal()

    def C_inv(self, v: np.ndarray) -> np.ndarray:
        """Apply C^{-1}; C is diagonal for elementwise constant multipliers."""
        return v / self.C_diag


def _check_spaces(V: SpaceSpec, Q: SpaceSpec):
    if Q.family is not Family.P0_disc:
        raise ValueError("only elementwise constant multipliers are supported")
    if V.family is Family.P0_disc:
        raise ValueError("displacement space cannot be P0_disc")


def _local_forms(mesh: Mesh, V: SpaceSpec, data: ProblemData, order: int, alpha: np.ndarray):
    """Local element matrices and vectors of both formulations."""
    h2 = mesh.diameters**2

    def work(s: slice):
        idx = np.arange(s.start, s.stop)
        tab = ElementTables(mesh, V.family, order, idx)
        dx = tab.dx
        fq = data.f(tab.x, tab.y)
        gq = data.g(tab.x, tab.y)
        K = np.einsum("kiqd,kjqd,kq->kij", tab.grads, tab.grads, dx)
        L = np.einsum("kiq,kjq,kq->kij", tab.laps, tab.laps, dx)
        Bl = np.einsum("iq,kq->ki", tab.values, dx)
        Bd = np.einsum("kiq,kq->ki", tab.laps, dx)
        Fl = np.einsum("iq,kq->ki", tab.values, fq * dx)
        Fd = np.einsum("kiq,kq->ki", tab.laps, fq * dx)
        G = np.einsum("kq->k", gq * dx)
        Fm = np.einsum("kq->k", fq * dx)
        area = np.einsum("kq->k", dx)
        nb = K.shape[1]
        packed = np.concatenate(
            [
                K.reshape(len(idx), -1),
                L.reshape(len(idx), -1),
                Bl,
                Bd,
                Fl,
                Fd,
                np.column_stack([G, Fm, area]),
            ],
            axis=1,
        )
        return packed

    packed = _chunked(work, mesh.nelements)
    nb = V.nlocal
    o = 0
    out = {}
    for name, width in (("K", nb * nb), ("L", nb * nb), ("Bl", nb), ("Bd", nb), ("Fl", nb), ("Fd", nb), ("rest", 3)):
        out[name] = packed[:, o : o + width]
        o += width
    nt = mesh.nelements
    out["K"] = out["K"].reshape(nt, nb, nb)
    out["L"] = out["L"].reshape(nt, nb, nb)
    out["G"], out["Fm"], out["area"] = out["rest"].T
    out["h2"] = h2
    return out


def _global(mesh, Vmap, Qmap, loc, alpha):
    nt = mesh.nelements
    cd = Vmap.cell_dofs
    q = Qmap.cell_dofs
    nV, nQ = Vmap.ndofs, Qmap.ndofs
    free = Vmap.free
    A = _scatter(loc["K"], cd, cd, (nV, nV))
    B = _scatter(loc["Bl"][:, None, :], q, cd, (nQ, nV))
    f = np.zeros(nV)
    np.add.at(f, cd.ravel(), loc["Fl"].ravel())
    g = np.zeros(nQ)
    np.add.at(g, q.ravel(), loc["G"])
    return A, B, f, g


def assemble_mixed(
    mesh: Mesh,
    V: SpaceSpec,
    Q: SpaceSpec = MULTIPLIER_SPACE,
    data: Optional[ProblemData] = None,
    order: int = DEFAULT_ORDER,
) -> MixedSystem:
    """Assemble A, B, f, g with Dirichlet dofs eliminated."""
    data = data or ProblemData()
    _check_spaces(V, Q)
    Vmap = build_dofmap(mesh, V)
    Qmap = build_dofmap(mesh, Q)
    loc = _local_forms(mesh, V, data, order, None)
    A, B, f, g = _global(mesh, Vmap, Qmap, loc, None)
    free = Vmap.free
    return MixedSystem(
        A=_restrict(A, free, free),
        B=_restrict(B, None, free),
        f=f[free],
        g=g,
        V=Vmap,
        Q=Qmap,
        mesh=mesh,
    )


def assemble_stabilized(
    mesh: Mesh,
    V: SpaceSpec,
    Q: SpaceSpec = MULTIPLIER_SPACE,
    data: Optional[ProblemData] = None,
    order: int = DEFAULT_ORDER,
) -> StabilizedSystem:
    """Assemble A_a, B_a, C_a, f_a, g_a with Dirichlet dofs eliminated."""
    data = data or ProblemData()
    _check_spaces(V, Q)
    alpha = data.alpha_per_element(mesh.nelements)
    if np.any(alpha <= 0):
        raise ValueError("stabilized assembly requires alpha > 0")
    Vmap = build_dofmap(mesh, V)
    Qmap = build_dofmap(mesh, Q)
    loc = _local_forms(mesh, V, data, order, alpha)
    A, B, f, g = _global(mesh, Vmap, Qmap, loc, alpha)
    ah2 = alpha * loc["h2"]
    cd = Vmap.cell_dofs
    q = Qmap.cell_dofs
    nV, nQ = Vmap.ndofs, Qmap.ndofs
    if V.degree > 1 or V.has_bubble:
        A = A - _scatter(ah2[:, None, None] * loc["L"], cd, cd, (nV, nV))
        B = B + _scatter((ah2[:, None] * loc["Bd"])[:, None, :], q, cd, (nQ, nV))
        np.add.at(f, cd.ravel(), (ah2[:, None] * loc["Fd"]).ravel())
    C = sp.diags(ah2 * loc["area"]).tocsr()
    g = g - ah2 * loc["Fm"]
    free = Vmap.free
    return StabilizedSystem(
        A=_restrict(csr(A), free, free),
        B=_restrict(csr(B), None, free),
        C=csr(C),
        f=f[free],
        g=g,
        V=Vmap,
        Q=Qmap,
        mesh=mesh,
        alpha=alpha,
    )


def laplacian_gram(mesh: Mesh, V: SpaceSpec, order: int = DEFAULT_ORDER) -> sp.csr_matrix:
    """sum_K h_K^2 (lap phi_i, lap phi_j)_K on the free dofs."""
    Vmap = build_dofmap(mesh, V)
    loc = _local_forms(mesh, V, ProblemData(), order, None)
    L = _scatter(loc["h2"][:, None, None] * loc["L"], Vmap.cell_dofs, Vmap.cell_dofs, (Vmap.ndofs,) * 2)
    return _restrict(L, Vmap.free, Vmap.free)


def mass_matrix(mesh: Mesh, V: SpaceSpec, order: Optional[int] = None) -> sp.csr_matrix:
    """(phi_i, phi_j) on the free dofs.

    The default quadrature integrates products of basis functions exactly
    (order 6 once the cubic bubble is present).
    """
    Vmap = build_dofmap(mesh, V)
    if order is None:
        order = 6 if V.has_bubble else 2 * V.degree

    def work(s):
        tab = ElementTables(mesh, V.family, order, np.arange(s.start, s.stop))
        return np.einsum("iq,jq,kq->kij", tab.values, tab.values, tab.dx)

    M = _chunked(work, mesh.nelements)
    M = _scatter(M, Vmap.cell_dofs, Vmap.cell_dofs, (Vmap.ndofs,) * 2)
    return _restrict(M, Vmap.free, Vmap.free)


def interpolate(mesh: Mesh, V: SpaceSpec, fn: Field) -> np.ndarray:
    """Nodal interpolant on all dofs (bubble coefficients set to zero)."""
    Vmap = build_dofmap(mesh, V)
    vals = np.zeros(Vmap.ndofs)
    nv = mesh.nvertices
    vals[:nv] = evaluate(fn, mesh.vertices[:, 0], mesh.vertices[:, 1])
    if V.degree == 2:
        e = mesh.edges
        mid = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
        vals[nv : nv + len(e)] = evaluate(fn, mid[:, 0], mid[:, 1])
    return vals


def consistency_residual(
    mesh: Mesh,
    V: SpaceSpec,
    data: ProblemData,
    lap_u: Field,
    lam: Field,
    order: int = 6,
) -> float:
    """Max over test functions of alpha |S_h(u, lam; v, mu) - F_h(v, mu)|.

    The displacement enters only through its elementwise Laplacian, so ``u``
    is passed as ``lap_u``. Tests run over the free displacement basis
    (mu = 0) and the elementwise characteristic functions (v = 0).
    """
    alpha = data.alpha_per_element(mesh.nelements)
    tab = ElementTables(mesh, V.family, order)
    Vmap = build_dofmap(mesh, V)
    h2 = mesh.diameters**2
    # residual density -lap u - lam - f, tested against -lap v - mu
    r = -evaluate(lap_u, tab.x, tab.y) - evaluate(lam, tab.x, tab.y) - data.f(tab.x, tab.y)
    w = (alpha * h2)[:, None] * r * tab.dx
    mu_part = np.abs(-w.sum(axis=1))
    v_local = -np.einsum("kbq,kq->kb", tab.laps, w)
    v_glob = np.zeros(Vmap.ndofs)
    np.add.at(v_glob, Vmap.cell_dofs.ravel(), v_local.ravel())
    v_part = np.abs(v_glob[Vmap.free])
    return float(max(mu_part.max(initial=0.0), v_part.max(initial=0.0)))


def condensed_bubble_alpha(mesh: Mesh, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Elementwise parameter induced by static condensation of the cubic bubble.

    Eliminating the bubble of P1+B3 / P0 leaves the P1-P0 stabilized
    system with ``alpha_K = (int_K b)^2 / (|grad b|_K^2 h_K^2 |K|)``.
    """
    tab = ElementTables(mesh, Family.P1_bubble, order)
    gb = tab.grads[:, 3]
    stiff = np.einsum("kqd,kqd,kq->k", gb, gb, tab.dx)
    mean = np.einsum("q,kq->k", tab.values[3], tab.dx)
    return mean**2 / (stiff * mesh.diameters**2 * tab.dx.sum(axis=1))


def inverse_constant(mesh: Mesh, V: SpaceSpec, order: int = DEFAULT_ORDER) -> float:
    """Dense estimate of the inverse-inequality constant C_I.

    Largest C with C sum_K h_K^2 |lap v|_K^2 <= |grad v|^2 on the free dofs;
    infinite when all Laplacians vanish.
    """
    import scipy.linalg as sla

    A = assemble_mixed(mesh, V, MULTIPLIER_SPACE, ProblemData(), order).A.toarray()
    L = laplacian_gram(mesh, V, order).toarray()
    if A.shape[0] == 0 or not np.any(L):
        return float("inf")
    mu = sla.eigh(L, A, eigvals_only=True)
    top = float(mu.max())
    return float("inf") if top <= 0 else 1.0 / top


def spaces_for(k: int, method: str):
    """Displacement/multiplier pair used by each method."""
    bubble = method == "mixed"
    return displacement_space(k, bubble=bubble), MULTIPLIER_SPACE
