"""Sparse linear solves used by the active-set iterations.

Matrices are :class:`scipy.sparse.csr_matrix`. Two solves are provided:
a Jacobi-preconditioned conjugate gradient for symmetric positive definite
systems, and a Schur-complement solve for the saddle-point systems of the
mixed method.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A linear solve failed; ``residual`` holds the achieved relative residual."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


class SingularSystemError(SolverError):
    pass


@dataclass
class SolveStats:
    solves: int = 0
    iterations: int = 0
    last_residual: float = 0.0
    history: list = field(default_factory=list)

    def record(self, its: int, res: float) -> None:
        self.solves += 1
        self.iterations += its
        self.last_residual = res
        self.history.append((its, res))


def csr(a) -> sp.csr_matrix:
    """Canonical CSR: sorted indices, summed duplicates, no stored zeros."""
    m = sp.csr_matrix(a)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


def pcg(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    diag: Optional[np.ndarray] = None,
    rel_tol: float = 1e-12,
    x0: Optional[np.ndarray] = None,
    maxiter: Optional[int] = None,
):
    """Preconditioned CG on an operator. Returns (x, iterations, rel_residual).

    Raises SolverError on non-convergence and SingularSystemError when a
    search direction has non-positive curvature.
    """
    n = len(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    if maxiter is None:
        maxiter = max(10 * n, 20)
    inv_d = np.ones(n) if diag is None else 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    for it in range(1, maxiter + 1):
        if res <= rel_tol:
            return x, it - 1, res
        q = matvec(p)
        curv = p @ q
        if not curv > 0:
            raise SingularSystemError(
                f"CG breakdown: non-positive curvature {curv:.3e} at iteration {it}", res
            )
        step = rz / curv
        x += step * p
        r -= step * q
        res = np.linalg.norm(r) / bnorm
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if res <= rel_tol:
        return x, maxiter, res
    raise SolverError(f"CG did not converge in {maxiter} iterations (residual {res:.3e})", res)


def spd_solve(
    A,
    b: np.ndarray,
    rel_tol: float = 1e-12,
    x0: Optional[np.ndarray] = None,
    stats: Optional[SolveStats] = None,
) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite sparse A.

    Jacobi-preconditioned conjugate gradients with an iteration cap of 10 n.
    The result satisfies ``|A x - b| <= rel_tol |b|``.
    """
    if not 0 < rel_tol < 1:
        raise ValueError("rel_tol must lie in (0, 1)")
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] == 0:
        return np.zeros(0)
    d = A.diagonal()
    if np.any(d <= 0):
        raise SingularSystemError("matrix has a non-positive diagonal entry; not SPD")
    x, its, res = pcg(A.dot, b, d, rel_tol, x0)
    if stats is not None:
        stats.record(its, res)
    return x


class Factorized:
    """Sparse direct factorization reused for repeated SPD solves."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        self.shape = A.shape
        self._lu = spla.splu(A) if A.shape[0] else None

    def __call__(self, b: np.ndarray) -> np.ndarray:
        if self._lu is None:
            return np.zeros(0)
        return self._lu.solve(np.asarray(b, dtype=float))


def saddle_solve(
    A,
    B_act,
    f: np.ndarray,
    g_act: np.ndarray,
    rel_tol: float = 1e-12,
    A_solve: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    stats: Optional[SolveStats] = None,
):
    """Solve ``[[A, -B^T], [-B, 0]] (u, lam) = (f, -g)``.

    Eliminates ``u = A^{-1}(f + B^T lam)`` and runs CG on the Schur complement
    ``B A^{-1} B^T lam = g - B A^{-1} f``. Inner solves use ``A_solve`` (a
    sparse factorization of A by default).

    Raises
    ------
    SingularSystemError
        If ``B_act`` is rank deficient.
    """
    A = sp.csr_matrix(A)
    B_act = sp.csr_matrix(B_act)
    f = np.asarray(f, dtype=float)
    g_act = np.asarray(g_act, dtype=float)
    m, n = B_act.shape
    if A_solve is None:
        A_solve = Factorized(A)
    if m == 0:
        u = A_solve(f)
        if stats is not None:
            stats.record(0, 0.0)
        return u, np.zeros(0)
    if m > n:
        raise SingularSystemError(
            f"rank-deficient active block: {m} active rows exceed {n} unknowns"
        )
    row_norms = np.sqrt(np.asarray(B_act.multiply(B_act).sum(axis=1)).ravel())
    if np.any(row_norms == 0):
        raise SingularSystemError(
            f"rank-deficient active block: {int(np.sum(row_norms == 0))} of {m} active rows are zero"
        )

    u0 = A_solve(f)
    rhs = g_act - B_act @ u0
    BT = B_act.T.tocsr()

    def schur(lam):
        return B_act @ A_solve(BT @ lam)

    # diagonal of B A^{-1} B^T approximated by B diag(A)^{-1} B^T
    dA = A.diagonal()
    precond = np.asarray(B_act.multiply(B_act) @ (1.0 / dA)).ravel()
    total = np.linalg.norm(np.concatenate([f, g_act]))
    try:
        lam, its, _ = pcg(schur, rhs, precond, rel_tol=0.1 * rel_tol, maxiter=max(10 * m, 50))
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"rank-deficient active block with {m} active rows ({exc})", exc.residual
        ) from exc
    except SolverError as exc:
        raise SingularSystemError(
            f"Schur complement solve failed for {m} active rows ({exc}); the block is (nearly) rank deficient",
            exc.residual,
        ) from exc
    u = A_solve(f + BT @ lam)
    res = np.linalg.norm(np.concatenate([A @ u - BT @ lam - f, g_act - B_act @ u]))
    rel = res / total if total > 0 else res
    if rel > rel_tol:
        # one step of iterative refinement on the full block system
        du, dl = _refine_step(A, B_act, BT, A_solve, f, g_act, u, lam, rel_tol)
        u, lam = u + du, lam + dl
        res = np.linalg.norm(np.concatenate([A @ u - BT @ lam - f, g_act - B_act @ u]))
        rel = res / total if total > 0 else res
    if rel > rel_tol:
        raise SingularSystemError(
            f"saddle solve with {m} active rows reached only relative residual {rel:.3e}", rel
        )
    if stats is not None:
        stats.record(its, rel)
    return u, lam


def _refine_step(A, B, BT, A_solve, f, g, u, lam, rel_tol):
    r1 = f - (A @ u - BT @ lam)
    r2 = g - B @ u
    z = A_solve(r1)
    rhs = r2 - B @ z
    m = B.shape[0]
    dl, _, _ = pcg(lambda v: B @ A_solve(BT @ v), rhs, None, rel_tol=0.1 * rel_tol, maxiter=max(10 * m, 50))
    du = A_solve(r1 + BT @ dl)
    return du, dl


def dump_matrix_market(path, matrix, comment: str = "") -> None:
    """Write a sparse matrix in MatrixMarket coordinate format."""
    import scipy.io

    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment, precision=17)
