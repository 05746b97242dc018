"""Independent reference computations used by the tests.

Everything here is dense and brute force on purpose: the enumeration oracle
checks all 2^M active sets, the block solves use numpy's dense LU.
"""
import itertools

import numpy as np

from obstacle_fem.mesh import Mesh


def fan_mesh(n, center=(0.0, 0.0), radius=2.0, phase=0.0):
    """Disk polygon with n boundary vertices joined to one interior vertex."""
    theta = phase + 2 * np.pi * np.arange(n) / n
    ring = radius * np.column_stack([np.cos(theta), np.sin(theta)])
    vertices = np.vstack([np.asarray(center, float)[None], ring])
    triangles = np.array([[0, 1 + i, 1 + (i + 1) % n] for i in range(n)])
    boundary = np.r_[False, np.ones(n, dtype=bool)]
    return Mesh(vertices, triangles, boundary, radius)


def dense_saddle(A, B, f, g):
    """Dense solve of [[A, -B^T], [-B, 0]] (u, lam) = (f, -g)."""
    A = np.asarray(A, float)
    B = np.asarray(B, float).reshape(-1, A.shape[0])
    n, m = A.shape[0], B.shape[0]
    K = np.block([[A, -B.T], [-B, np.zeros((m, m))]])
    sol = np.linalg.solve(K, np.concatenate([f, -np.asarray(g, float)]))
    return sol[:n], sol[n:]


def enumerate_mixed(A, B, f, g, tol=1e-10):
    """All active sets S with a KKT-feasible saddle solution.

    Returns a list of (S, u, lam) for which lam_S >= 0 and B_I u >= g_I.
    """
    A, B = np.asarray(A, float), np.asarray(B, float)
    M = B.shape[0]
    found = []
    for mask in itertools.product((False, True), repeat=M):
        S = np.flatnonzero(mask)
        if len(S) > A.shape[0]:
            continue
        try:
            u, lS = dense_saddle(A, B[S], f, g[S])
        except np.linalg.LinAlgError:
            continue
        lam = np.zeros(M)
        lam[S] = lS
        gap = B @ u - g
        scale = max(1.0, np.abs(g).max())
        if np.all(lam >= -tol * scale) and np.all(gap >= -tol * scale):
            found.append((S, u, lam))
    return found


def enumerate_stabilized(A, B, Cdiag, f, g, tol=1e-10):
    """KKT-feasible active sets of the stabilized complementarity system.

    For a set S: (A + B_S^T C_S^{-1} B_S) u = f + B_S^T C_S^{-1} g_S,
    lam = C^{-1}(g - B u) on S and 0 elsewhere; feasible when lam_S >= 0 and
    (g - B u)_I <= 0.
    """
    A, B = np.asarray(A, float), np.asarray(B, float)
    M = B.shape[0]
    found = []
    for mask in itertools.product((False, True), repeat=M):
        S = np.flatnonzero(mask)
        W = np.diag(1.0 / Cdiag[S])
        K = A + B[S].T @ W @ B[S]
        u = np.linalg.solve(K, f + B[S].T @ W @ g[S])
        r = (g - B @ u) / Cdiag
        scale = max(1.0, np.abs(r).max())
        inactive = np.setdiff1d(np.arange(M), S)
        if np.all(r[S] >= -tol * scale) and np.all(r[inactive] <= tol * scale):
            lam = np.zeros(M)
            lam[S] = r[S]
            found.append((S, u, lam))
    return found


def monomial_integral(a, b):
    """Integral of x^a y^b over the reference triangle."""
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)
